//! Adaptation cost at language-model width. Run with `--ignored`.

use std::time::Instant;

use gae_core::explainer::{ActivationBatch, Dictionary, ExplainerKind, Sparsifier};
use gae_core::gae::{adapt, GaeConfig};
use gae_core::rng::{gaussian_matrix, seeded};
use nalgebra::DVector;

#[test]
#[ignore = "allocates several hundred MB and takes minutes on one core"]
fn adapt_at_width_768() {
    let (d, k, n) = (768, 24_576, 2048);
    let mut rng = seeded(9);
    let w_enc = gaussian_matrix(&mut rng, k, d, 1.0 / (d as f64).sqrt());
    let w_dec = gaussian_matrix(&mut rng, d, k, 1.0 / (d as f64).sqrt());
    let dict = Dictionary::new(w_enc, DVector::zeros(k), w_dec, DVector::zeros(d), Sparsifier::TopK { k_active: 64 }, ExplainerKind::Sae).unwrap();
    let ood = ActivationBatch::new(gaussian_matrix(&mut rng, n, d, 1.0)).unwrap();
    let cfg = GaeConfig {
        n_fit: n,
        ..GaeConfig::default()
    };
    let start = Instant::now();
    let result = adapt(&dict, &ood, &cfg).unwrap();
    let total = start.elapsed().as_secs_f64();
    let t = &result.summary().timing;
    println!(
        "d={d} k={k} n_fit={n}: total {total:.2}s (moment {:.2}s, subspaces {:.2}s, procrustes {:.2}s, encode {:.2}s, refit {:.2}s)",
        t.moment, t.subspaces, t.procrustes, t.encode, t.refit
    );
    assert!(result.gap_after <= 1e-6);
}
