mod common;

use common::*;
use intent_core::network::{NetConfig, Network, StatMode};

fn toy(seed: u64) -> Network {
    Network::build(NetConfig { depth: 2, base_width: 4, ..Default::default() }, seed).unwrap()
}

#[test]
fn reference_matches_library_forward() {
    let net = toy(3);
    let x = random_image(9, 1, 16, 16);
    let (g, b) = affine_f64(&net.affine_params());
    for lambda in [0.0, 0.3, 1.0] {
        let r = reference_forward(&net, &x, lambda, &g, &b);
        let p = net.forward(&x, StatMode::new(lambda as f32).unwrap()).unwrap();
        for (a, b) in p.values().iter().zip(&r.probs) {
            assert!((*a as f64 - b).abs() < 1e-5, "lambda {lambda}: {a} vs {b}");
        }
    }
}

#[test]
fn affine_gradients_match_finite_differences() {
    let net = toy(11);
    let x = random_image(3, 1, 16, 16);
    for lambda in [0.0, 0.5, 1.0] {
        let (probes, redrawn) = gradient_probes(&net, &x, lambda, 20, 1e-3, 7);
        let worst = probes.iter().map(Probe::rel_error).fold(0.0, f64::max);
        for p in &probes {
            println!("lambda {lambda} idx {} tape {:.6e} fd {:.6e} rel {:.2e}", p.index, p.tape, p.fd, p.rel_error());
        }
        println!("lambda {lambda}: worst {worst:.2e}, redrawn {redrawn}");
        assert!(worst <= 1e-3, "lambda {lambda}: worst relative error {worst}");
    }
}
