//! Test-only helpers: a naive f64 reference of the network forward pass and
//! small data builders.
#![allow(dead_code)]

use intent_core::kernel::Tensor;
use intent_core::network::{AffineParams, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Single-image feature map in f64, channel-major.
#[derive(Clone)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Map {
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }
}

pub struct Reference {
    pub probs: Vec<f64>,
    /// ReLU input signs and max-pool winners, in the same encoding as
    /// `Tape::branch_pattern`.
    pub pattern: Vec<u32>,
}

struct Walker<'a> {
    net: &'a Network,
    gamma: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    lambda: f64,
    conv_i: usize,
    bn_i: usize,
    pattern: Vec<u32>,
}

impl Walker<'_> {
    fn conv(&mut self, x: &Map) -> Map {
        let layer = &self.net.conv_layers()[self.conv_i];
        self.conv_i += 1;
        let shape = layer.weight.shape();
        let (co, ci, k) = (shape[0], shape[1], shape[2]);
        assert_eq!(ci, x.c);
        let pad = layer.padding as isize;
        let wt = layer.weight.data();
        let mut out = vec![0.0; co * x.h * x.w];
        for o in 0..co {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut acc = layer.bias[o] as f64;
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                acc += wt[((o * ci + i) * k + ky) * k + kx] as f64
                                    * x.at(i, sy as usize, sx as usize);
                            }
                        }
                    }
                    out[(o * x.h + y) * x.w + xx] = acc;
                }
            }
        }
        Map { c: co, h: x.h, w: x.w, v: out }
    }

    fn bn_relu(&mut self, x: &Map) -> Map {
        let i = self.bn_i;
        self.bn_i += 1;
        let layer = &self.net.bn_layers()[i];
        let plane = x.h * x.w;
        let eps = layer.eps as f64;
        let mut out = x.v.clone();
        for c in 0..x.c {
            let vals = &x.v[c * plane..(c + 1) * plane];
            let (mut m, mut var) = (layer.tracked.mean[c] as f64, layer.tracked.var[c] as f64);
            if self.lambda < 1.0 {
                let im = vals.iter().sum::<f64>() / plane as f64;
                let iv = vals.iter().map(|v| (v - im) * (v - im)).sum::<f64>() / plane as f64;
                m = self.lambda * m + (1.0 - self.lambda) * im;
                var = self.lambda * var + (1.0 - self.lambda) * iv;
            }
            let s = 1.0 / (var + eps).sqrt();
            for v in &mut out[c * plane..(c + 1) * plane] {
                *v = self.gamma[i][c] * (*v - m) * s + self.beta[i][c];
            }
        }
        for v in &mut out {
            self.pattern.push((*v > 0.0) as u32);
            *v = v.max(0.0);
        }
        Map { v: out, ..*x }
    }

    fn block(&mut self, x: &Map) -> Map {
        let y = self.conv(x);
        self.bn_relu(&y)
    }
}

fn maxpool(x: &Map, pattern: &mut Vec<u32>) -> Map {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        let base = c * x.h * x.w;
        for y in 0..h {
            for xx in 0..w {
                let mut best = base + 2 * y * x.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * x.w + 2 * xx + dx;
                    if x.v[i] > x.v[best] {
                        best = i;
                    }
                }
                pattern.push(best as u32);
                out.push(x.v[best]);
            }
        }
    }
    Map { c: x.c, h, w, v: out }
}

fn upsample(x: &Map) -> Map {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.push(x.at(c, y / 2, xx / 2));
            }
        }
    }
    Map { c: x.c, h, w, v: out }
}

fn concat(a: &Map, b: &Map) -> Map {
    let mut v = a.v.clone();
    v.extend_from_slice(&b.v);
    Map { c: a.c + b.c, h: a.h, w: a.w, v }
}

/// Naive f64 forward of `net` on a `[1, C, H, W]` image at mixing weight
/// `lambda`, with BN scale/shift taken from `affine` as f64.
pub fn reference_forward(
    net: &Network,
    x: &Tensor,
    lambda: f64,
    gamma: &[Vec<f64>],
    beta: &[Vec<f64>],
) -> Reference {
    let s = x.shape();
    assert_eq!(s[0], 1);
    let depth = net.config().depth;
    let mut wk = Walker {
        net,
        gamma: gamma.to_vec(),
        beta: beta.to_vec(),
        lambda,
        conv_i: 0,
        bn_i: 0,
        pattern: Vec::new(),
    };
    let mut v = Map {
        c: s[1],
        h: s[2],
        w: s[3],
        v: x.data().iter().map(|&a| a as f64).collect(),
    };
    // Pattern order must follow execution order, so pooling is pushed inline.
    let mut skips = Vec::new();
    for _ in 0..depth {
        v = wk.block(&v);
        v = wk.block(&v);
        skips.push(v.clone());
        let mut p = std::mem::take(&mut wk.pattern);
        v = maxpool(&v, &mut p);
        wk.pattern = p;
    }
    v = wk.block(&v);
    v = wk.block(&v);
    for skip in skips.into_iter().rev() {
        v = upsample(&v);
        v = wk.block(&v);
        v = concat(&skip, &v);
        v = wk.block(&v);
        v = wk.block(&v);
    }
    let logits = wk.conv(&v);
    Reference {
        probs: logits.v.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect(),
        pattern: wk.pattern,
    }
}

pub fn affine_f64(a: &AffineParams) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let cast = |v: &[Vec<f32>]| v.iter().map(|l| l.iter().map(|&x| x as f64).collect()).collect();
    (cast(&a.gamma), cast(&a.beta))
}

/// Summed binary entropy with the same clamp as the library.
pub fn entropy_sum(p: &[f64]) -> f64 {
    p.iter()
        .map(|&v| {
            let v = v.clamp(1e-7, 1.0 - 1e-7);
            -v * v.ln() - (1.0 - v) * (1.0 - v).ln()
        })
        .sum()
}

pub fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![1, c, h, w], (0..c * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
}

pub struct Probe {
    pub index: usize,
    pub tape: f64,
    pub fd: f64,
}

impl Probe {
    pub fn rel_error(&self) -> f64 {
        let scale = self.tape.abs().max(self.fd.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.tape - self.fd).abs() / scale
        }
    }
}

/// Compares the tape gradient of summed entropy w.r.t. every BN scale/shift
/// against central differences of the f64 reference. Probes whose ±step
/// evaluations change a ReLU or max-pool decision are redrawn, since the
/// network function has no derivative across those.
pub fn gradient_probes(
    net: &Network,
    x: &Tensor,
    lambda: f64,
    count: usize,
    step: f64,
    seed: u64,
) -> (Vec<Probe>, usize) {
    use intent_core::adaptation::EntropyLoss;
    use intent_core::kernel::{grad_entropy_wrt_affine, GradScope};
    use intent_core::network::StatMode;

    let mode = StatMode::new(lambda as f32).unwrap();
    let mut rec = net.forward_recorded(x, mode, None, GradScope::AffineOnly).unwrap();
    let h = rec.tape.scalar(rec.probs, Box::new(EntropyLoss::sum())).unwrap();
    let tape_pattern = rec.tape.branch_pattern();
    let grads = net.affine_grads(&grad_entropy_wrt_affine(&rec.tape, h).unwrap());
    let flat = grads.flatten();
    let (gamma, beta) = affine_f64(&net.affine_params());
    let base = reference_forward(net, x, lambda, &gamma, &beta);
    assert_eq!(base.pattern, tape_pattern, "reference and tape disagree on branches");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    let mut redrawn = 0;
    let n_gamma: usize = gamma.iter().map(Vec::len).sum();
    while probes.len() < count {
        let index = rng.random_range(0..flat.len());
        let eval = |d: f64| {
            let (mut g, mut b) = (gamma.clone(), beta.clone());
            let (set, mut k) = if index < n_gamma { (&mut g, index) } else { (&mut b, index - n_gamma) };
            for layer in set.iter_mut() {
                if k < layer.len() {
                    layer[k] += d;
                    break;
                }
                k -= layer.len();
            }
            reference_forward(net, x, lambda, &g, &b)
        };
        let (plus, minus) = (eval(step), eval(-step));
        if plus.pattern != base.pattern || minus.pattern != base.pattern {
            redrawn += 1;
            continue;
        }
        let fd = (entropy_sum(&plus.probs) - entropy_sum(&minus.probs)) / (2.0 * step);
        probes.push(Probe {
            index,
            tape: flat[index] as f64,
            fd,
        });
    }
    (probes, redrawn)
}

/// A sweep small enough for unit-speed tests: two targets, two trials.
pub fn tiny_config(data_root: &std::path::Path) -> intent_core::harness::ExperimentConfig {
    use intent_core::harness::ExperimentConfig;
    use intent_core::network::NetConfig;
    use intent_core::synthdata::{DatasetPlan, DomainPlan, DomainSpec};
    use intent_core::trainer::TrainConfig;
    let domain = |spec: DomainSpec, start, count| DomainPlan { spec, start, count };
    ExperimentConfig {
        data_root: data_root.to_path_buf(),
        dataset: Some(DatasetPlan {
            seed: 3,
            height: 16,
            width: 16,
            domains: vec![
                domain(DomainSpec::identity("src"), 0, 10),
                domain(
                    DomainSpec {
                        intensity_bias: 0.2,
                        contrast: 1.5,
                        noise_sigma: 0.02,
                        ..DomainSpec::identity("bright")
                    },
                    100,
                    4,
                ),
                domain(
                    DomainSpec {
                        gamma: 0.7,
                        blur_radius: 1,
                        ..DomainSpec::identity("soft")
                    },
                    200,
                    3,
                ),
            ],
        }),
        source: "src".into(),
        targets: vec!["bright".into(), "soft".into()],
        trials: 2,
        network: NetConfig {
            depth: 2,
            base_width: 4,
            ..NetConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 4,
            lr: 1e-3,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

/// Strict RFC 4180 parser: CRLF or LF records, quoted fields with doubled
/// quotes, no stray quotes, equal field counts.
pub fn parse_rfc4180(text: &str) -> Result<Vec<Vec<String>>, String> {
    let mut rows = Vec::new();
    let mut row = Vec::new();
    let mut field = String::new();
    let mut chars = text.chars().peekable();
    let mut quoted = false;
    let mut at_field_start = true;
    while let Some(c) = chars.next() {
        if quoted {
            if c == '"' {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    field.push('"');
                } else {
                    quoted = false;
                    match chars.peek() {
                        Some(',') | Some('\n') | Some('\r') | None => {}
                        Some(other) => return Err(format!("character {other:?} after closing quote")),
                    }
                }
            } else {
                field.push(c);
            }
            continue;
        }
        match c {
            '"' if at_field_start => {
                quoted = true;
                at_field_start = false;
            }
            '"' => return Err("quote inside unquoted field".into()),
            ',' => {
                row.push(std::mem::take(&mut field));
                at_field_start = true;
            }
            '\r' => {
                if chars.next() != Some('\n') {
                    return Err("bare CR".into());
                }
                row.push(std::mem::take(&mut field));
                rows.push(std::mem::take(&mut row));
                at_field_start = true;
            }
            '\n' => {
                row.push(std::mem::take(&mut field));
                rows.push(std::mem::take(&mut row));
                at_field_start = true;
            }
            _ => {
                field.push(c);
                at_field_start = false;
            }
        }
    }
    if quoted {
        return Err("unterminated quote".into());
    }
    if !field.is_empty() || !row.is_empty() {
        row.push(field);
        rows.push(row);
    }
    if let Some(first) = rows.first() {
        if let Some(bad) = rows.iter().position(|r| r.len() != first.len()) {
            return Err(format!("record {bad} has {} fields, header {}", rows[bad].len(), first.len()));
        }
    }
    Ok(rows)
}
