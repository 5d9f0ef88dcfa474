use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::entropy::EntropyStats;
use crate::error::{Error, Result};
use crate::network::ProbMap;

pub const DEFAULT_TOPK: usize = 2;

/// Rule that turns per-member statistics into convex weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Strategy {
    Average,
    Entropy,
    EntMin,
    EntTopK(usize),
    EntNorm,
    #[default]
    EntBaln,
    Sharpness,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Average,
        Strategy::Entropy,
        Strategy::EntMin,
        Strategy::EntTopK(DEFAULT_TOPK),
        Strategy::EntNorm,
        Strategy::EntBaln,
        Strategy::Sharpness,
    ];

    pub fn needs_sharpness(&self) -> bool {
        matches!(self, Strategy::Sharpness)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Average => f.write_str("AVERAGE"),
            Strategy::Entropy => f.write_str("ENTROPY"),
            Strategy::EntMin => f.write_str("ENT_MIN"),
            Strategy::EntTopK(k) if *k == DEFAULT_TOPK => f.write_str("ENT_TOPK"),
            Strategy::EntTopK(k) => write!(f, "ENT_TOPK:{k}"),
            Strategy::EntNorm => f.write_str("ENT_NORM"),
            Strategy::EntBaln => f.write_str("ENT_BALN"),
            Strategy::Sharpness => f.write_str("SHARPNESS"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Case-insensitive; `ENT_TOPK:3` sets K.
    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        let (name, arg) = match upper.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (upper.as_str(), None),
        };
        let strategy = match (name, arg) {
            ("AVERAGE", None) => Strategy::Average,
            ("ENTROPY", None) => Strategy::Entropy,
            ("ENT_MIN", None) => Strategy::EntMin,
            ("ENT_TOPK", None) => Strategy::EntTopK(DEFAULT_TOPK),
            ("ENT_TOPK", Some(k)) => {
                let k: usize = k
                    .parse()
                    .map_err(|_| Error::Config(format!("bad K in strategy {s:?}")))?;
                if k == 0 {
                    return Err(Error::Config("ENT_TOPK needs K >= 1".into()));
                }
                Strategy::EntTopK(k)
            }
            ("ENT_NORM", None) => Strategy::EntNorm,
            ("ENT_BALN", None) => Strategy::EntBaln,
            ("SHARPNESS", None) => Strategy::Sharpness,
            _ => return Err(Error::Config(format!("unknown strategy {s:?}"))),
        };
        Ok(strategy)
    }
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Scores before normalization and the final convex weights.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Weights {
    pub scores: Vec<f64>,
    pub normalized: Vec<f64>,
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Divides by `max - min`; left as-is when the range is zero.
pub fn range_normalize(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if range > 0.0 {
        scores.iter().map(|s| s / range).collect()
    } else {
        scores.to_vec()
    }
}

/// Indices of the `k` smallest values, ties going to the lower index.
fn smallest(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn uniform_over(n: usize, chosen: &[usize]) -> Vec<f64> {
    let mut w = vec![0.0; n];
    for &i in chosen {
        w[i] = 1.0 / chosen.len() as f64;
    }
    w
}

/// Convex weights over the ensemble members for `strategy`. `sharpness` is
/// only read by [`Strategy::Sharpness`]. A single member always gets weight 1.
pub fn compute_weights(
    strategy: Strategy,
    stats: &[EntropyStats],
    sharpness: Option<&[f64]>,
) -> Result<Weights> {
    let n = stats.len();
    if n == 0 {
        return Err(Error::Contract("no ensemble members to weigh".into()));
    }
    if let Some(s) = sharpness {
        if s.len() != n {
            return Err(Error::Shape(format!("{} sharpness values for {n} members", s.len())));
        }
    }
    let mean_h: Vec<f64> = stats.iter().map(|s| s.mean_entropy).collect();
    let scores: Vec<f64> = match strategy {
        Strategy::Average => vec![0.0; n],
        Strategy::Entropy | Strategy::EntNorm | Strategy::EntMin | Strategy::EntTopK(_) => {
            mean_h.iter().map(|h| -h).collect()
        }
        Strategy::EntBaln => stats.iter().map(|s| -s.balanced()).collect(),
        Strategy::Sharpness => sharpness
            .ok_or_else(|| Error::Contract("SHARPNESS weighting needs sharpness values".into()))?
            .iter()
            .map(|s| -s)
            .collect(),
    };
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Contract(format!("non-finite weighting scores {scores:?}")));
    }
    if n == 1 {
        return Ok(Weights {
            scores,
            normalized: vec![1.0],
        });
    }
    let normalized = match strategy {
        Strategy::Average => vec![1.0 / n as f64; n],
        Strategy::Entropy => softmax(&scores),
        Strategy::EntMin => uniform_over(n, &smallest(&mean_h, 1)),
        Strategy::EntTopK(k) => {
            if k == 0 || k > n {
                return Err(Error::Config(format!("ENT_TOPK K = {k} with {n} members")));
            }
            uniform_over(n, &smallest(&mean_h, k))
        }
        Strategy::EntNorm | Strategy::EntBaln | Strategy::Sharpness => {
            softmax(&range_normalize(&scores))
        }
    };
    Ok(Weights { scores, normalized })
}

/// Pixelwise convex combination of the members.
pub fn integrate(preds: &[ProbMap], weights: &[f64]) -> Result<ProbMap> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Contract("nothing to integrate".into()))?;
    if preds.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} predictions, {} weights",
            preds.len(),
            weights.len()
        )));
    }
    if preds.iter().any(|p| !p.same_shape(first)) {
        return Err(Error::Shape("ensemble members differ in shape".into()));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("weights {weights:?} are not convex")));
    }
    // One-hot weights return the member itself.
    if let Some(k) = weights.iter().position(|&w| w == 1.0) {
        return Ok(preds[k].clone());
    }
    let mut acc = vec![0.0f64; first.len()];
    for (p, &w) in preds.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (a, &v) in acc.iter_mut().zip(p.values()) {
            *a += w * v as f64;
        }
    }
    let values = acc.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    ProbMap::new(first.height(), first.width(), values)
}
