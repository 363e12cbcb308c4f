use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::phenotype::PhenotypeVector;

pub const OUTCOME_NAMES: [&str; 6] = ["cad", "af", "scd", "hf", "mi", "cmp"];

/// Reference centre and scale used to standardize phenotypes before the
/// logistic scores; fixed constants, not cohort statistics.
const REF_EDV: (f64, f64) = (155.0, 37.5);
const REF_EF: (f64, f64) = (0.62, 0.09);
const REF_MASS: (f64, f64) = (180.0, 45.0);
const REF_WALL: (f64, f64) = (9.0, 1.7);
const REF_RV_EDV: (f64, f64) = (163.0, 42.0);
const REF_HR: (f64, f64) = (75.0, 14.4);
const REF_GCS: (f64, f64) = (-0.22, 0.03);

fn z(v: f64, r: (f64, f64)) -> f64 {
    (v - r.0) / r.1
}

/// Linear risk scores, one per outcome, in `OUTCOME_NAMES` order.
pub fn outcome_scores(p: &PhenotypeVector) -> [f64; 6] {
    let edv = z(p.lv_edv, REF_EDV);
    let ef = z(p.lv_ef, REF_EF);
    let mass = z(p.lv_mass, REF_MASS);
    let wall = z(p.wall_thickness, REF_WALL);
    let rv = z(p.rv_edv, REF_RV_EDV);
    let hr = z(p.heart_rate, REF_HR);
    let gcs = z(p.gcs, REF_GCS);
    [
        -2.6 + 0.6 * mass + 0.4 * hr - 0.4 * ef,
        -2.8 + 0.7 * rv + 0.6 * hr,
        -3.0 - 0.9 * ef + 0.5 * wall,
        -2.4 - 1.2 * ef + 0.6 * edv,
        -2.9 + 0.8 * gcs + 0.3 * mass,
        -3.0 + 0.9 * wall + 0.5 * mass,
    ]
}

/// `P(label = 1) = sigmoid(score / noise_weight)`; with zero noise weight
/// the probability is 1 exactly when the score is positive.
pub fn outcome_probability(score: f64, noise_weight: f64) -> f64 {
    if noise_weight == 0.0 {
        return if score > 0.0 { 1.0 } else { 0.0 };
    }
    1.0 / (1.0 + (-score / noise_weight).exp())
}

/// Label is `score + noise_weight * logistic noise > 0`.
pub fn simulate_outcomes(p: &PhenotypeVector, seed: u64, noise_weight: f64) -> [bool; 6] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = outcome_scores(p);
    let mut out = [false; 6];
    for (o, s) in out.iter_mut().zip(scores) {
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let logistic = (u / (1.0 - u)).ln();
        *o = s + noise_weight * logistic > 0.0;
    }
    out
}
