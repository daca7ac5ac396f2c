use serde::{Deserialize, Serialize};
use treelab::graph::{GraphSpec, QuotientGraph, TreePoint, TreeVertex};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("{field} = {value} outside the safe range {range}")]
    Range {
        field: &'static str,
        value: String,
        range: &'static str,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub graph: GraphSpec,
    /// Used when `--out` is not given.
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub spectrum: SpectrumParams,
    #[serde(default)]
    pub green: GreenParams,
    #[serde(default)]
    pub pressure: PressureParams,
    #[serde(default)]
    pub measures: MeasuresParams,
    #[serde(default)]
    pub llt: LltParams,
    #[serde(default)]
    pub mc: McParams,
    #[serde(default)]
    pub diagnostics: DiagnosticsParams,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumParams {
    pub radius: f64,
    pub h: f64,
    pub tolerance: f64,
}

impl Default for SpectrumParams {
    fn default() -> Self {
        SpectrumParams {
            radius: 20.0,
            h: 0.02,
            tolerance: 2e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreenParams {
    /// λ as fractions of λ₀.
    pub lambda_fractions: Vec<f64>,
    /// Pairs of vertex words; `-` is the base lift.
    pub pairs: Vec<(String, String)>,
}

impl Default for GreenParams {
    fn default() -> Self {
        GreenParams {
            lambda_fractions: vec![0.0, 0.5, 0.9],
            pairs: vec![("-".into(), "-".into()), ("-".into(), "a".into())],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PressureParams {
    pub points: usize,
    pub k: usize,
}

impl Default for PressureParams {
    fn default() -> Self {
        PressureParams { points: 8, k: 6 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasuresParams {
    pub lambda_fractions: Vec<f64>,
    /// Combinatorial depth of the conformality shadows.
    pub shadow_depth: usize,
    pub max_distance: f64,
    pub cylinders: usize,
    pub seed: u64,
}

impl Default for MeasuresParams {
    fn default() -> Self {
        MeasuresParams {
            lambda_fractions: vec![0.0, 0.5, 1.0],
            shadow_depth: 8,
            max_distance: 8.0,
            cylinders: 50,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LltParams {
    pub radius: f64,
    /// Smaller radii used to estimate the truncation error.
    pub reference_radii: Vec<f64>,
    pub h: f64,
    pub dt: f64,
    pub window: (f64, f64),
    pub point: String,
    pub tauberian_points: usize,
}

impl Default for LltParams {
    fn default() -> Self {
        LltParams {
            radius: 20.0,
            reference_radii: vec![18.0, 16.0],
            h: 0.05,
            dt: 0.01,
            window: (20.0, 60.0),
            point: "-".into(),
            tauberian_points: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McParams {
    pub n_paths: usize,
    pub delta: f64,
    pub seed: u64,
    pub horizon: f64,
    pub kill_depth: usize,
    pub targets: Vec<String>,
    pub lambda_fractions: Vec<f64>,
    pub density_time: f64,
    pub bandwidth: f64,
    pub pde_radius: f64,
    pub pde_h: f64,
    pub pde_dt: f64,
}

impl Default for McParams {
    fn default() -> Self {
        McParams {
            n_paths: 100_000,
            delta: 1e-3,
            seed: 7,
            horizon: 400.0,
            kill_depth: 16,
            targets: vec!["a".into(), "aB".into()],
            lambda_fractions: vec![0.0, 0.5],
            density_time: 1.0,
            bandwidth: 0.1,
            pde_radius: 10.0,
            pde_h: 0.01,
            pde_dt: 0.001,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsParams {
    pub max_word_length: usize,
    pub beta: f64,
    pub ancona_samples: usize,
    pub seed: u64,
}

impl Default for DiagnosticsParams {
    fn default() -> Self {
        DiagnosticsParams {
            max_word_length: 8,
            beta: 2.0,
            ancona_samples: 200,
            seed: 3,
        }
    }
}

fn check(field: &'static str, v: f64, lo: f64, hi: f64, range: &'static str) -> Result<(), ConfigError> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(ConfigError::Range {
            field,
            value: v.to_string(),
            range,
        })
    }
}

impl ExperimentConfig {
    pub fn load(path: &str) -> Result<(Self, Vec<u8>), ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
            path: path.to_string(),
            source,
        })?;
        let cfg: ExperimentConfig =
            serde_json::from_slice(&bytes).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok((cfg, bytes))
    }

    pub fn quotient(&self) -> Result<QuotientGraph, ConfigError> {
        QuotientGraph::from_spec(&self.graph).map_err(|e| ConfigError::Graph(e.to_string()))
    }

    pub fn vertex(&self, g: &QuotientGraph, word: &str) -> Result<TreePoint, ConfigError> {
        let w = g.parse_word(word).map_err(|e| ConfigError::Graph(e.to_string()))?;
        let v = TreeVertex::from_word(g, w).map_err(|e| ConfigError::Graph(e.to_string()))?;
        Ok(TreePoint::vertex(v))
    }

    pub fn override_seed(&mut self, seed: u64) {
        self.measures.seed = seed;
        self.mc.seed = seed;
        self.diagnostics.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let g = self.quotient()?;
        let s = &self.spectrum;
        check("spectrum.radius", s.radius, 4.0, 40.0, "[4, 40]")?;
        check("spectrum.h", s.h, 1e-3, g.min_length(), "[1e-3, shortest edge]")?;
        check("spectrum.tolerance", s.tolerance, 0.0, 1.0, "[0, 1]")?;
        for &f in &self.green.lambda_fractions {
            check("green.lambda_fractions", f, 0.0, 1.0, "[0, 1]")?;
        }
        for (a, b) in &self.green.pairs {
            self.vertex(&g, a)?;
            self.vertex(&g, b)?;
        }
        check("pressure.points", self.pressure.points as f64, 2.0, 64.0, "[2, 64]")?;
        check("pressure.k", self.pressure.k as f64, 2.0, 10.0, "[2, 10]")?;
        let m = &self.measures;
        for &f in &m.lambda_fractions {
            check("measures.lambda_fractions", f, 0.0, 1.0, "[0, 1]")?;
        }
        check("measures.shadow_depth", m.shadow_depth as f64, 3.0, 12.0, "[3, 12]")?;
        check("measures.max_distance", m.max_distance, 2.0, 12.0, "[2, 12]")?;
        check("measures.cylinders", m.cylinders as f64, 1.0, 1000.0, "[1, 1000]")?;
        let l = &self.llt;
        check("llt.radius", l.radius, 4.0, 40.0, "[4, 40]")?;
        for &r in &l.reference_radii {
            check("llt.reference_radii", r, 4.0, l.radius - 0.5, "[4, radius)")?;
        }
        check("llt.h", l.h, 1e-3, g.min_length(), "[1e-3, shortest edge]")?;
        check("llt.dt", l.dt, 1e-4, 0.05, "[1e-4, 0.05]")?;
        check("llt.window.0", l.window.0, 1.0, l.window.1, "[1, window end]")?;
        check("llt.window.1", l.window.1, l.window.0, 500.0, "[window start, 500]")?;
        check("llt.tauberian_points", l.tauberian_points as f64, 12.0, 200.0, "[12, 200]")?;
        self.vertex(&g, &l.point)?;
        let c = &self.mc;
        check("mc.n_paths", c.n_paths as f64, 10.0, 1e7, "[10, 1e7]")?;
        check("mc.delta", c.delta, 1e-5, 0.01, "[1e-5, 1e-2]")?;
        check("mc.horizon", c.horizon, 1.0, 500.0, "[1, 500]")?;
        check("mc.kill_depth", c.kill_depth as f64, 2.0, 64.0, "[2, 64]")?;
        for &f in &c.lambda_fractions {
            check("mc.lambda_fractions", f, 0.0, 0.9, "[0, 0.9]")?;
        }
        for t in &c.targets {
            self.vertex(&g, t)?;
        }
        check("mc.density_time", c.density_time, 0.05, 10.0, "[0.05, 10]")?;
        check("mc.bandwidth", c.bandwidth, 2.0 * c.delta.sqrt(), 0.5, "[2√δ, 0.5]")?;
        check("mc.pde_radius", c.pde_radius, 4.0, 30.0, "[4, 30]")?;
        check("mc.pde_h", c.pde_h, 1e-3, g.min_length(), "[1e-3, shortest edge]")?;
        check("mc.pde_dt", c.pde_dt, 1e-4, 0.05, "[1e-4, 0.05]")?;
        let d = &self.diagnostics;
        check("diagnostics.max_word_length", d.max_word_length as f64, 2.0, 14.0, "[2, 14]")?;
        check("diagnostics.beta", d.beta, 1.0, 10.0, "[1, 10]")?;
        check("diagnostics.ancona_samples", d.ancona_samples as f64, 1.0, 10_000.0, "[1, 10000]")?;
        Ok(())
    }
}
