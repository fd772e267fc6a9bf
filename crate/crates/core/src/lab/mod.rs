//! Experiment harness: run configuration, phantom construction, noise,
//! CSV artifact emission, and the study drivers used by the CLI.

mod studies;

pub use studies::{
    run_bfgs_quality_study, run_hessian_accuracy_study, run_reconstruction_suite, suite_phantoms,
};

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{ConductivityField, ElectrodeConfig, MeasurementSelection};
use crate::mesh::{make_disc_mesh, TriMesh};
use crate::numerics::Vector;
use crate::optim::{IterRecord, RecoSettings, Variant};

/// Every tunable of the toolkit, deserialized from the JSON passed to
/// `--config`. Unknown keys are rejected; missing keys take the defaults
/// below.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub radius: f64,
    pub n_rings: usize,
    pub n_electrodes: usize,
    pub electrode_coverage: f64,
    pub contact_impedance: f64,
    pub lambda: f64,
    pub snr: f64,
    pub seed: u64,
    pub variant: Variant,
    pub lbfgs_memory: usize,
    pub stagnation_tol: f64,
    pub dedupe_reciprocal: bool,
    pub skip_driven: bool,
    pub freeze_h0: bool,
    pub neumann_const_alt: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            radius: 1.0,
            n_rings: 7,
            n_electrodes: 16,
            electrode_coverage: 0.5,
            contact_impedance: 0.01,
            lambda: 5e-5,
            snr: 50.0,
            seed: 0,
            variant: Variant::LbfgsH,
            lbfgs_memory: 20,
            stagnation_tol: 1e-4,
            dedupe_reciprocal: false,
            skip_driven: false,
            freeze_h0: false,
            neumann_const_alt: false,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParam(what.into()));
        if !(self.radius > 0.0) {
            return bad("radius must be positive");
        }
        if self.n_rings < 2 {
            return bad("n_rings must be at least 2");
        }
        if self.n_electrodes < 2 {
            return bad("n_electrodes must be at least 2");
        }
        if !(self.electrode_coverage > 0.0 && self.electrode_coverage < 1.0) {
            return bad("electrode_coverage must lie in (0, 1)");
        }
        if !(self.contact_impedance > 0.0) {
            return bad("contact_impedance must be positive");
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return bad("lambda must be finite and non-negative");
        }
        if self.snr < 0.0 {
            return bad("snr must be non-negative (0 disables noise)");
        }
        if self.lbfgs_memory == 0 {
            return bad("lbfgs_memory must be positive");
        }
        if self.stagnation_tol < 0.0 {
            return bad("stagnation_tol must be non-negative");
        }
        Ok(())
    }

    pub fn build_mesh(&self) -> Result<TriMesh> {
        make_disc_mesh(
            self.radius,
            self.n_rings,
            self.n_electrodes,
            self.electrode_coverage,
        )
    }

    /// Finer mesh used to simulate data; distinct refinement avoids the
    /// inverse crime.
    pub fn build_sim_mesh(&self, rings: usize) -> Result<TriMesh> {
        make_disc_mesh(self.radius, rings, self.n_electrodes, self.electrode_coverage)
    }

    pub fn electrode_config(&self) -> Result<ElectrodeConfig> {
        ElectrodeConfig::uniform(self.n_electrodes, self.contact_impedance)
    }

    pub fn selection(&self) -> MeasurementSelection {
        MeasurementSelection {
            dedupe_reciprocal: self.dedupe_reciprocal,
            skip_driven: self.skip_driven,
        }
    }

    pub fn solver_settings(&self) -> RecoSettings {
        RecoSettings {
            variant: self.variant,
            lambda: self.lambda,
            lbfgs_memory: self.lbfgs_memory,
            stagnation_tol: self.stagnation_tol,
            freeze_h0: self.freeze_h0,
            neumann_const_alt: self.neumann_const_alt,
            ..RecoSettings::default()
        }
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            snr: self.snr,
            seed: self.seed,
        }
    }

    /// Defaults for the Hessian-diagonal accuracy study: the 256-element
    /// mesh, noiseless data, and the measurement protocol that skips driven
    /// electrodes (whose rows are dominated by electrode discretization
    /// error rather than interior conductivity).
    pub fn hessian_study_defaults() -> Self {
        RunConfig {
            n_rings: 4,
            snr: 0.0,
            skip_driven: true,
            ..RunConfig::default()
        }
    }

    /// Defaults for the dense BFGS quality study; same scene and protocol
    /// as the accuracy study, with lighter regularisation so the data term
    /// dominates the tracked Hessians over the full 50 iterations.
    pub fn bfgs_study_defaults() -> Self {
        RunConfig {
            n_rings: 4,
            snr: 0.0,
            skip_driven: true,
            lambda: 1e-6,
            ..RunConfig::default()
        }
    }

    /// Defaults for the reconstruction suite: the fine mesh, SNR-50 noise,
    /// and the same skip-driven protocol.
    pub fn suite_defaults() -> Self {
        RunConfig {
            skip_driven: true,
            ..RunConfig::default()
        }
    }
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Gn => "GN",
            Variant::LbfgsH => "LBFGS_H",
            Variant::LbfgsGn => "LBFGS_GN",
            Variant::LbfgsGnh => "LBFGS_GNH",
            Variant::LbfgsI => "LBFGS_I",
        }
    }

    pub fn all() -> [Variant; 5] {
        [
            Variant::Gn,
            Variant::LbfgsH,
            Variant::LbfgsGn,
            Variant::LbfgsGnh,
            Variant::LbfgsI,
        ]
    }
}

/// One circular inclusion of a piecewise-constant phantom.
#[derive(Clone, Copy, Debug)]
pub struct Inclusion {
    pub center: [f64; 2],
    pub radius: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub inclusions: Vec<Inclusion>,
    pub sigma0: f64,
}

impl Phantom {
    pub fn validate(&self, domain_radius: f64) -> Result<()> {
        if !(self.sigma0 > 0.0) {
            return Err(Error::InvalidParam("background sigma must be positive".into()));
        }
        for inc in &self.inclusions {
            if !(inc.sigma > 0.0) || !(inc.radius > 0.0) {
                return Err(Error::InvalidParam(
                    "inclusion radius and sigma must be positive".into(),
                ));
            }
            let d = (inc.center[0].powi(2) + inc.center[1].powi(2)).sqrt();
            if d + inc.radius > domain_radius + 1e-12 {
                return Err(Error::InvalidParam(format!(
                    "inclusion at ({}, {}) radius {} leaves the disc",
                    inc.center[0], inc.center[1], inc.radius
                )));
            }
        }
        Ok(())
    }
}

/// Element conductivity by centroid membership; later inclusions override
/// earlier ones on overlap.
pub fn rasterize_phantom(phantom: &Phantom, mesh: &TriMesh) -> Result<ConductivityField> {
    phantom.validate(mesh.radius())?;
    let mut v = Vector::from_element(mesh.n_elements(), phantom.sigma0);
    for inc in &phantom.inclusions {
        let r2 = inc.radius * inc.radius;
        for i in 0..mesh.n_elements() {
            let c = mesh.centroids()[i];
            let dx = c[0] - inc.center[0];
            let dy = c[1] - inc.center[1];
            if dx * dx + dy * dy < r2 {
                v[i] = inc.sigma;
            }
        }
    }
    ConductivityField::new(v)
}

#[derive(Clone, Copy, Debug)]
pub struct NoiseSpec {
    /// RMS(signal) / std(noise); 0 disables noise entirely.
    pub snr: f64,
    pub seed: u64,
}

/// Additive iid Gaussian noise scaled to the requested SNR, reproducible
/// from the seed.
pub fn add_noise(d: &Vector, spec: NoiseSpec) -> Vector {
    if spec.snr <= 0.0 || !spec.snr.is_finite() || d.is_empty() {
        return d.clone();
    }
    let rms = d.norm() / (d.len() as f64).sqrt();
    let sd = rms / spec.snr;
    if sd == 0.0 {
        return d.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, sd).expect("positive std");
    Vector::from_iterator(d.len(), d.iter().map(|&x| x + normal.sample(&mut rng)))
}

/// What a study produced: scenario id, the exact configuration, files
/// written, and headline metrics. Validated so a reported run can be trusted
/// to exist on disk.
pub struct ExperimentReport {
    pub scenario: String,
    pub config_json: String,
    pub files: Vec<PathBuf>,
    pub metrics: Vec<(String, f64)>,
}

impl ExperimentReport {
    pub fn new(scenario: &str, cfg: &RunConfig) -> Self {
        ExperimentReport {
            scenario: scenario.into(),
            config_json: serde_json::to_string(cfg).expect("config serializes"),
            files: Vec::new(),
            metrics: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for f in &self.files {
            if !f.exists() {
                return Err(Error::MissingField(format!(
                    "report lists missing file {}",
                    f.display()
                )));
            }
        }
        Ok(())
    }
}

/// Image CSV: one row per element with its centroid.
pub fn write_image_csv(path: &Path, mesh: &TriMesh, values: &Vector) -> Result<()> {
    if values.len() != mesh.n_elements() {
        return Err(Error::DimensionMismatch {
            expected: mesh.n_elements(),
            got: values.len(),
        });
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "element,x,y,m")?;
    for i in 0..mesh.n_elements() {
        let c = mesh.centroids()[i];
        writeln!(f, "{i},{},{},{}", c[0], c[1], values[i])?;
    }
    Ok(())
}

/// Per-iteration run log. Wall-clock times are only included where
/// determinism of the file does not matter.
pub fn write_run_csv(path: &Path, records: &[IterRecord], with_wall: bool) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    if with_wall {
        writeln!(f, "iter,phi,rel_resid,step,ls_evals,wall_ms")?;
    } else {
        writeln!(f, "iter,phi,rel_resid,step,ls_evals")?;
    }
    for r in records {
        if with_wall {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                r.iter, r.phi, r.rel_resid, r.step, r.ls_evals, r.wall_ms
            )?;
        } else {
            writeln!(f, "{},{},{},{},{}", r.iter, r.phi, r.rel_resid, r.step, r.ls_evals)?;
        }
    }
    Ok(())
}

/// Values of a reconstructed image along the x = y diameter, inside the
/// domain margin.
pub fn slice_profile(mesh: &TriMesh, values: &Vector, n_points: usize) -> Vec<(f64, f64)> {
    let r = mesh.radius() * 0.99;
    let mut out = Vec::with_capacity(n_points);
    for k in 0..n_points {
        let s = -r + 2.0 * r * k as f64 / (n_points - 1) as f64;
        let q = [s / 2f64.sqrt(), s / 2f64.sqrt()];
        if let Some(e) = mesh.find_element(q) {
            out.push((s, values[e]));
        }
    }
    out
}

/// Count of prominent local maxima: plateaus collapse to one candidate, and
/// a peak counts when it stands at least 15% of the slice's range above the
/// higher of the valleys separating it from larger terrain.
pub fn count_slice_maxima(values: &[f64]) -> usize {
    let mut v: Vec<f64> = Vec::with_capacity(values.len());
    for &x in values {
        if v.last() != Some(&x) {
            v.push(x);
        }
    }
    if v.len() < 3 {
        return 0;
    }
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let need = 0.15 * (hi - lo);
    let mut count = 0;
    for i in 1..v.len() - 1 {
        if !(v[i] > v[i - 1] && v[i] > v[i + 1]) {
            continue;
        }
        let side_min = |iter: &mut dyn Iterator<Item = usize>| {
            let mut m = v[i];
            for j in iter {
                if v[j] > v[i] {
                    return m;
                }
                m = m.min(v[j]);
            }
            m
        };
        let left = side_min(&mut (0..i).rev());
        let right = side_min(&mut (i + 1..v.len()));
        if v[i] - left.max(right) >= need {
            count += 1;
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.n_rings, 7);
        assert_eq!(cfg.lambda, 5e-5);
        assert_eq!(cfg.snr, 50.0);
        assert!(matches!(cfg.variant, Variant::LbfgsH));
        cfg.validate().unwrap();

        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"variant\":\"LBFGS_H\""));
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.lbfgs_memory, 20);

        let partial: RunConfig = serde_json::from_str(r#"{"n_rings": 3}"#).unwrap();
        assert_eq!(partial.n_rings, 3);
        assert_eq!(partial.n_electrodes, 16);

        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"variant": "QN"}"#).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        for (field, json) in [
            ("radius", r#"{"radius": 0.0}"#),
            ("rings", r#"{"n_rings": 1}"#),
            ("coverage", r#"{"electrode_coverage": 1.0}"#),
            ("impedance", r#"{"contact_impedance": -1.0}"#),
            ("lambda", r#"{"lambda": -1e-5}"#),
            ("memory", r#"{"lbfgs_memory": 0}"#),
        ] {
            let cfg: RunConfig = serde_json::from_str(json).unwrap();
            assert!(cfg.validate().is_err(), "{field} accepted");
        }
    }

    #[test]
    fn rasterizer_rules() {
        let mesh = make_disc_mesh(1.0, 4, 16, 0.5).unwrap();
        let flat = rasterize_phantom(
            &Phantom {
                inclusions: vec![],
                sigma0: 1.5,
            },
            &mesh,
        )
        .unwrap();
        assert!(flat.values().iter().all(|&v| v == 1.5));

        let all = rasterize_phantom(
            &Phantom {
                inclusions: vec![Inclusion {
                    center: [0.0, 0.0],
                    radius: 1.0,
                    sigma: 3.0,
                }],
                sigma0: 1.0,
            },
            &mesh,
        )
        .unwrap();
        assert!(all.values().iter().all(|&v| v == 3.0));

        // Override on overlap: the later inclusion wins.
        let over = rasterize_phantom(
            &Phantom {
                inclusions: vec![
                    Inclusion {
                        center: [0.0, 0.0],
                        radius: 0.5,
                        sigma: 2.0,
                    },
                    Inclusion {
                        center: [0.0, 0.0],
                        radius: 0.3,
                        sigma: 4.0,
                    },
                ],
                sigma0: 1.0,
            },
            &mesh,
        )
        .unwrap();
        let c = mesh.find_element([0.05, 0.05]).unwrap();
        assert_eq!(over.values()[c], 4.0);

        // Fraction of flagged elements tracks the area ratio.
        let frac = rasterize_phantom(
            &Phantom {
                inclusions: vec![Inclusion {
                    center: [0.3, 0.3],
                    radius: 0.25,
                    sigma: 2.0,
                }],
                sigma0: 1.0,
            },
            &mesh,
        )
        .unwrap();
        let hit = frac.values().iter().filter(|&&v| v == 2.0).count() as f64
            / mesh.n_elements() as f64;
        assert!(
            (hit - 0.0625).abs() <= 0.3 * 0.0625,
            "hit fraction {hit} vs expected 0.0625"
        );

        let escape = Phantom {
            inclusions: vec![Inclusion {
                center: [0.9, 0.0],
                radius: 0.5,
                sigma: 2.0,
            }],
            sigma0: 1.0,
        };
        assert!(rasterize_phantom(&escape, &mesh).is_err());
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let d = Vector::from_fn(240, |i, _| 1.0 + (i as f64 * 0.7).sin());
        let clean = add_noise(&d, NoiseSpec { snr: 0.0, seed: 1 });
        assert_eq!(clean, d);
        let inf = add_noise(
            &d,
            NoiseSpec {
                snr: f64::INFINITY,
                seed: 1,
            },
        );
        assert_eq!(inf, d);

        let a = add_noise(&d, NoiseSpec { snr: 50.0, seed: 7 });
        let b = add_noise(&d, NoiseSpec { snr: 50.0, seed: 7 });
        assert_eq!(a, b, "same seed must reproduce bits");
        assert_ne!(a, add_noise(&d, NoiseSpec { snr: 50.0, seed: 8 }));

        // Average relative noise magnitude over seeds approaches 1/SNR.
        let mut acc = 0.0;
        let n_seeds = 20;
        for seed in 0..n_seeds {
            let noisy = add_noise(&d, NoiseSpec { snr: 50.0, seed });
            acc += (noisy - &d).norm() / d.norm();
        }
        let mean = acc / n_seeds as f64;
        let rel = mean * 50.0;
        assert!((rel - 1.0).abs() <= 0.1, "relative noise x SNR = {rel}");
    }

    #[test]
    fn slice_and_peak_counting() {
        let mesh = make_disc_mesh(1.0, 4, 16, 0.5).unwrap();
        let mut v = Vector::from_element(mesh.n_elements(), 1.0);
        for i in 0..mesh.n_elements() {
            let c = mesh.centroids()[i];
            for s in [-0.5, 0.5] {
                let dx = c[0] - s / 2f64.sqrt();
                let dy = c[1] - s / 2f64.sqrt();
                if dx * dx + dy * dy < 0.04 {
                    v[i] = 2.0;
                }
            }
        }
        let prof = slice_profile(&mesh, &v, 201);
        assert_eq!(prof.len(), 201);
        assert!(prof.windows(2).all(|w| w[0].0 < w[1].0));
        let vals: Vec<f64> = prof.iter().map(|p| p.1).collect();
        assert_eq!(count_slice_maxima(&vals), 2);

        assert_eq!(count_slice_maxima(&[1.0, 1.0, 1.0]), 0);
        assert_eq!(count_slice_maxima(&[0.0, 1.0, 0.0]), 1);
        // Plateau peak counts once.
        assert_eq!(count_slice_maxima(&[0.0, 1.0, 1.0, 1.0, 0.0]), 1);
        // Shallow ripple below prominence threshold is ignored.
        assert_eq!(count_slice_maxima(&[0.0, 1.0, 0.98, 1.01, 0.0]), 1);
    }

    #[test]
    fn report_validation() {
        let cfg = RunConfig::default();
        let mut rep = ExperimentReport::new("unit", &cfg);
        rep.validate().unwrap();
        rep.files.push(PathBuf::from("/nonexistent/file.csv"));
        assert!(rep.validate().is_err());
        assert!(rep.config_json.contains("n_rings"));
    }
}
