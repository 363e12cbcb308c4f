use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Myocardial tissue density, g/mL.
pub const MYOCARDIUM_DENSITY: f64 = 1.05;

/// Long-axis to short-axis ratio of the cavity ellipsoid.
pub const LONG_AXIS_RATIO: f64 = 2.0;

/// Ground-truth cardiac measurements for one subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhenotypeVector {
    /// mL
    pub lv_edv: f64,
    pub lv_esv: f64,
    pub lv_sv: f64,
    pub lv_ef: f64,
    /// g
    pub lv_mass: f64,
    /// mm
    pub wall_thickness: f64,
    pub rv_edv: f64,
    pub rv_ef: f64,
    pub gcs: f64,
    pub gls: f64,
    pub grs: f64,
    /// L/min
    pub cardiac_output: f64,
    /// bpm
    pub heart_rate: f64,
}

pub const PHENOTYPE_NAMES: [&str; 13] = [
    "lv_edv",
    "lv_esv",
    "lv_sv",
    "lv_ef",
    "lv_mass",
    "wall_thickness",
    "rv_edv",
    "rv_ef",
    "gcs",
    "gls",
    "grs",
    "cardiac_output",
    "heart_rate",
];

/// Short semi-axis (mm) of a cavity ellipsoid holding `volume_ml`.
pub fn cavity_semi_axis(volume_ml: f64) -> f64 {
    (volume_ml * 1000.0 * 3.0 / (4.0 * PI * LONG_AXIS_RATIO)).cbrt()
}

/// Volume in mL enclosed between the cavity with short semi-axis `s` and
/// the shell grown outward by `t` mm.
pub fn shell_volume_ml(s: f64, t: f64) -> f64 {
    let outer = (s + t) * (s + t) * (LONG_AXIS_RATIO * s + t);
    let inner = s * s * LONG_AXIS_RATIO * s;
    4.0 / 3.0 * PI * (outer - inner) / 1000.0
}

impl PhenotypeVector {
    /// Fills the derived quantities so the stroke volume, ejection fraction
    /// and cardiac output identities hold exactly.
    #[allow(clippy::too_many_arguments)]
    pub fn from_measurements(
        lv_edv: f64,
        lv_esv: f64,
        lv_mass: f64,
        wall_thickness: f64,
        rv_edv: f64,
        rv_ef: f64,
        strains: [f64; 3],
        heart_rate: f64,
    ) -> Self {
        let lv_sv = lv_edv - lv_esv;
        Self {
            lv_edv,
            lv_esv,
            lv_sv,
            lv_ef: lv_sv / lv_edv,
            lv_mass,
            wall_thickness,
            rv_edv,
            rv_ef,
            gcs: strains[0],
            gls: strains[1],
            grs: strains[2],
            cardiac_output: lv_sv * heart_rate / 1000.0,
            heart_rate,
        }
    }

    pub fn values(&self) -> [f64; 13] {
        [
            self.lv_edv,
            self.lv_esv,
            self.lv_sv,
            self.lv_ef,
            self.lv_mass,
            self.wall_thickness,
            self.rv_edv,
            self.rv_ef,
            self.gcs,
            self.gls,
            self.grs,
            self.cardiac_output,
            self.heart_rate,
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        PHENOTYPE_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.values()[i])
    }

    pub fn from_values(v: &[f64; 13]) -> Self {
        Self {
            lv_edv: v[0],
            lv_esv: v[1],
            lv_sv: v[2],
            lv_ef: v[3],
            lv_mass: v[4],
            wall_thickness: v[5],
            rv_edv: v[6],
            rv_ef: v[7],
            gcs: v[8],
            gls: v[9],
            grs: v[10],
            cardiac_output: v[11],
            heart_rate: v[12],
        }
    }
}

/// Draws a plausible phenotype vector. EF falls with EDV, mass follows from
/// the shell geometry, and the strain proxies are linear in EF plus noise.
pub fn sample_phenotypes(seed: u64) -> PhenotypeVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let gauss = |sd: f64, rng: &mut ChaCha8Rng| sd * std_normal.sample(rng);

    let lv_edv = rng.random_range(90.0..=220.0);
    let ef_target = (0.62 - 0.18 * (lv_edv - 155.0) / 65.0 + gauss(0.06, &mut rng)).clamp(0.35, 0.75);
    let lv_esv = lv_edv * (1.0 - ef_target);
    let wall_thickness = rng.random_range(6.0..=12.0);
    let lv_mass = MYOCARDIUM_DENSITY * shell_volume_ml(cavity_semi_axis(lv_edv), wall_thickness);
    let rv_edv = lv_edv * (1.05 + gauss(0.1, &mut rng)).clamp(0.8, 1.3);
    let ef = (lv_edv - lv_esv) / lv_edv;
    let rv_ef = (ef + gauss(0.04, &mut rng)).clamp(0.3, 0.8);
    let gcs = -(0.05 + 0.28 * ef) + gauss(0.015, &mut rng);
    let gls = -(0.04 + 0.24 * ef) + gauss(0.015, &mut rng);
    let grs = 0.1 + 0.6 * ef + gauss(0.04, &mut rng);
    let heart_rate = rng.random_range(50.0..=100.0);
    PhenotypeVector::from_measurements(
        lv_edv,
        lv_esv,
        lv_mass,
        wall_thickness,
        rv_edv,
        rv_ef,
        [gcs, gls, grs],
        heart_rate,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identities_on_hand_values() {
        let p = PhenotypeVector::from_measurements(150.0, 60.0, 150.0, 9.0, 160.0, 0.6, [-0.2, -0.18, 0.45], 70.0);
        assert_eq!(p.lv_ef, 0.6);
        assert_eq!(p.lv_sv, 90.0);
        assert_eq!(p.cardiac_output, 6.3);
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample_phenotypes(42), sample_phenotypes(42));
        assert_ne!(sample_phenotypes(42), sample_phenotypes(43));
    }

    #[test]
    fn semi_axis_inverts_volume() {
        let s = cavity_semi_axis(150.0);
        let v = 4.0 / 3.0 * PI * s * s * LONG_AXIS_RATIO * s / 1000.0;
        assert!((v - 150.0).abs() < 1e-9);
    }

    #[test]
    fn edv_and_ef_are_negatively_correlated() {
        let ps: Vec<_> = (0..2000).map(sample_phenotypes).collect();
        let n = ps.len() as f64;
        let me = ps.iter().map(|p| p.lv_edv).sum::<f64>() / n;
        let mf = ps.iter().map(|p| p.lv_ef).sum::<f64>() / n;
        let cov = ps.iter().map(|p| (p.lv_edv - me) * (p.lv_ef - mf)).sum::<f64>();
        assert!(cov < 0.0);
    }

    proptest! {
        #[test]
        fn sampled_vectors_satisfy_identities(seed in any::<u64>()) {
            let p = sample_phenotypes(seed);
            prop_assert_eq!(p.lv_sv, p.lv_edv - p.lv_esv);
            prop_assert_eq!(p.lv_ef, p.lv_sv / p.lv_edv);
            prop_assert_eq!(p.cardiac_output, p.lv_sv * p.heart_rate / 1000.0);
            prop_assert!(p.lv_ef > 0.0 && p.lv_ef < 1.0);
            prop_assert!((90.0..=220.0).contains(&p.lv_edv));
            prop_assert!((0.35 - 1e-12..=0.75 + 1e-12).contains(&p.lv_ef));
            prop_assert!((50.0..=100.0).contains(&p.heart_rate));
            prop_assert!(p.gcs < 0.0 && p.gls < 0.0 && p.grs > 0.0);
        }
    }
}
