//! Experiment configuration and its flat `section.key = value` form.

use std::collections::BTreeMap;

use crate::geometry::{SyntheticSpec, SyntheticTask};
use crate::perslay::{DiagramCoords, PersLayConfig};
use crate::weightnet::{FinalInit, WeightNetConfig};
use crate::{Error, Result};

use super::deepsets::DeepSetsConfig;
use super::topo::FiltrationMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentMode {
    /// Topological features and a linear classifier.
    Classify,
    /// DeepSets first, then the topological branch next to the frozen DeepSets.
    TwoPhase,
    /// Linear classifier on the cloud feature `h(X)`.
    DistMatrix,
    /// Fit the weight network to DTM weights.
    DtmRegression,
}

impl ExperimentMode {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentMode::Classify => "classify",
            ExperimentMode::TwoPhase => "two-phase",
            ExperimentMode::DistMatrix => "distmatrix",
            ExperimentMode::DtmRegression => "dtm-regression",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "classify" => ExperimentMode::Classify,
            "two-phase" => ExperimentMode::TwoPhase,
            "distmatrix" => ExperimentMode::DistMatrix,
            "dtm-regression" => ExperimentMode::DtmRegression,
            _ => return Err(Error::Config(format!("unknown mode {s:?}"))),
        })
    }
}

/// Surrogate for dynamical-distance matrices of two protein classes; see
/// [`super::data::protein_surrogate`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProteinSpec {
    pub n_types: usize,
    pub base_points: usize,
    pub subsample: usize,
    pub noise_sigma: f64,
}

impl Default for ProteinSpec {
    fn default() -> Self {
        Self {
            n_types: 14,
            base_points: 370,
            subsample: 60,
            noise_sigma: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Protein(ProteinSpec),
    /// A directory written by the `generate` command; loaded by the caller.
    Directory(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mode: ExperimentMode,
    pub data: DataSource,
    pub n_clouds: usize,
    pub seed: u64,
    pub folds: usize,
    /// Number of folds actually trained, starting from fold 0.
    pub run_folds: usize,
    pub filtration: FiltrationMode,
    /// DTM parameters for the `dtm` filtration and the regression target.
    pub k0: usize,
    pub q: f64,
    pub t_max: f64,
    pub degree: usize,
    pub weightnet_preset: String,
    pub weightnet: WeightNetConfig,
    pub perslay: PersLayConfig,
    pub deepsets_preset: String,
    pub deepsets: DeepSetsConfig,
    /// Zero topological feature in phase two, for sanity runs.
    pub topo_enabled: bool,
    pub batch_size: usize,
    pub epochs1: usize,
    pub epochs2: usize,
    pub eta_max1: f64,
    pub eta_max2: f64,
    pub n_warmup: usize,
    pub bn_momentum: f64,
    /// Evaluate on the held-out fold every this many epochs (0: only at the end).
    pub eval_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut weightnet = WeightNetConfig::desk();
        weightnet.final_init = FinalInit::Gaussian(1e-4);
        Self {
            mode: ExperimentMode::Classify,
            data: DataSource::Synthetic(SyntheticSpec {
                task: SyntheticTask::CircleVsDiskWithOutliers,
                n_points: 64,
                n_outliers: 8,
                noise_sigma: 0.05,
            }),
            n_clouds: 500,
            seed: 0,
            folds: 5,
            run_folds: 1,
            filtration: FiltrationMode::Learned,
            k0: 2,
            q: 2.0,
            t_max: f64::INFINITY,
            degree: 1,
            weightnet_preset: "desk".into(),
            weightnet,
            perslay: PersLayConfig::default(),
            deepsets_preset: "desk".into(),
            deepsets: DeepSetsConfig::desk(),
            topo_enabled: true,
            batch_size: 40,
            epochs1: 200,
            epochs2: 100,
            eta_max1: 2.0e-2,
            eta_max2: 1.0e-2,
            n_warmup: 40,
            bn_momentum: 0.1,
            eval_every: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = match v.trim() {
        "inf" | "+inf" => f64::INFINITY,
        s => parse(key, s)?,
    };
    if x.is_nan() {
        return Err(Error::Config(format!("{key}: NaN")));
    }
    Ok(x)
}

fn fmt_f64(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else {
        format!("{x:?}")
    }
}

fn parse_final_init(v: &str) -> Result<FinalInit> {
    match v {
        "fanin" => Ok(FinalInit::FanIn),
        "zero" => Ok(FinalInit::Zero),
        _ => match v.strip_prefix("gaussian:") {
            Some(s) => {
                let std = parse_f64("weightnet.final_init", s)?;
                if !(std.is_finite() && std >= 0.0) {
                    return Err(Error::Config("final-layer std must be finite and >= 0".into()));
                }
                Ok(FinalInit::Gaussian(std))
            }
            None => Err(Error::Config(format!("weightnet.final_init: unknown {v:?}"))),
        },
    }
}

fn fmt_final_init(f: FinalInit) -> String {
    match f {
        FinalInit::FanIn => "fanin".into(),
        FinalInit::Zero => "zero".into(),
        FinalInit::Gaussian(s) => format!("gaussian:{s:?}"),
    }
}

impl ExperimentConfig {
    /// Builds a config from `section.key` entries on top of the defaults.
    /// Presets are applied before the keys that refine them.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        if let Some(p) = map.get("weightnet.preset") {
            c.weightnet_preset = p.clone();
            let fi = c.weightnet.final_init;
            c.weightnet = WeightNetConfig::preset(p)?;
            c.weightnet.final_init = fi;
        }
        if let Some(p) = map.get("deepsets.preset") {
            c.deepsets_preset = p.clone();
            c.deepsets = DeepSetsConfig::preset(p)?;
        }
        let mut source = map.get("data.source").map(String::as_str).unwrap_or("synthetic").to_string();
        let mut synth = match &c.data {
            DataSource::Synthetic(s) => *s,
            _ => unreachable!("default data source is synthetic"),
        };
        let mut protein = ProteinSpec::default();
        let mut dir = String::new();
        let mut fmode = c.filtration.name().to_string();
        for (key, v) in map {
            let v = v.trim();
            match key.as_str() {
                "weightnet.preset" | "deepsets.preset" | "data.source" => {}
                "experiment.mode" => c.mode = ExperimentMode::parse(v)?,
                "experiment.seed" => c.seed = parse(key, v)?,
                "experiment.folds" => c.folds = parse(key, v)?,
                "experiment.run_folds" => c.run_folds = parse(key, v)?,
                "experiment.eval_every" => c.eval_every = parse(key, v)?,
                "experiment.topo_enabled" => c.topo_enabled = parse(key, v)?,
                "data.task" => {
                    synth.task = SyntheticTask::parse(v).ok_or_else(|| Error::Config(format!("{key}: unknown task {v:?}")))?
                }
                "data.n_points" => synth.n_points = parse(key, v)?,
                "data.n_outliers" => synth.n_outliers = parse(key, v)?,
                "data.noise_sigma" => synth.noise_sigma = parse_f64(key, v)?,
                "data.n_clouds" => c.n_clouds = parse(key, v)?,
                "data.dir" => {
                    dir = v.to_string();
                    source = "dir".into();
                }
                "data.protein_types" => protein.n_types = parse(key, v)?,
                "data.protein_base_points" => protein.base_points = parse(key, v)?,
                "data.protein_subsample" => protein.subsample = parse(key, v)?,
                "data.protein_noise" => protein.noise_sigma = parse_f64(key, v)?,
                "filtration.mode" => fmode = v.to_string(),
                "filtration.k0" => c.k0 = parse(key, v)?,
                "filtration.q" => c.q = parse_f64(key, v)?,
                "filtration.t_max" => c.t_max = parse_f64(key, v)?,
                "filtration.degree" => c.degree = parse(key, v)?,
                "weightnet.final_init" => c.weightnet.final_init = parse_final_init(v)?,
                "weightnet.batch_norm" => c.weightnet.batch_norm = parse(key, v)?,
                "weightnet.dropout" => c.weightnet.dropout_p = parse_f64(key, v)?,
                "weightnet.clamp" => c.weightnet.clamp_nonnegative = parse(key, v)?,
                "perslay.centers" => c.perslay.n_centers = parse(key, v)?,
                "perslay.out_dim" => c.perslay.out_dim = parse(key, v)?,
                "perslay.coords" => {
                    c.perslay.coords = match v {
                        "birth-death" => DiagramCoords::BirthDeath,
                        "birth-persistence" => DiagramCoords::BirthPersistence,
                        _ => return Err(Error::Config(format!("{key}: unknown {v:?}"))),
                    }
                }
                "deepsets.batch_norm" => c.deepsets.batch_norm = parse(key, v)?,
                "deepsets.dropout" => c.deepsets.dropout_p = parse_f64(key, v)?,
                "optim.batch_size" => c.batch_size = parse(key, v)?,
                "optim.epochs1" => c.epochs1 = parse(key, v)?,
                "optim.epochs2" => c.epochs2 = parse(key, v)?,
                "optim.eta_max1" => c.eta_max1 = parse_f64(key, v)?,
                "optim.eta_max2" => c.eta_max2 = parse_f64(key, v)?,
                "optim.n_warmup" => c.n_warmup = parse(key, v)?,
                "optim.bn_momentum" => c.bn_momentum = parse_f64(key, v)?,
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
        }
        c.data = match source.as_str() {
            "synthetic" => DataSource::Synthetic(synth),
            "protein" => DataSource::Protein(protein),
            "dir" => DataSource::Directory(dir),
            _ => return Err(Error::Config(format!("data.source: unknown {source:?}"))),
        };
        c.filtration = match fmode.as_str() {
            "rips" => FiltrationMode::Rips,
            "dtm" => FiltrationMode::Dtm { k0: c.k0, q: c.q },
            "learned" => FiltrationMode::Learned,
            _ => return Err(Error::Config(format!("filtration.mode: unknown {fmode:?}"))),
        };
        c.validate()?;
        Ok(c)
    }

    /// Every setting as `section.key` entries; `from_map` inverts it.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("experiment.mode", self.mode.name().into());
        put("experiment.seed", self.seed.to_string());
        put("experiment.folds", self.folds.to_string());
        put("experiment.run_folds", self.run_folds.to_string());
        put("experiment.eval_every", self.eval_every.to_string());
        put("experiment.topo_enabled", self.topo_enabled.to_string());
        put("data.n_clouds", self.n_clouds.to_string());
        match &self.data {
            DataSource::Synthetic(s) => {
                put("data.source", "synthetic".into());
                put("data.task", s.task.name().into());
                put("data.n_points", s.n_points.to_string());
                put("data.n_outliers", s.n_outliers.to_string());
                put("data.noise_sigma", fmt_f64(s.noise_sigma));
            }
            DataSource::Protein(p) => {
                put("data.source", "protein".into());
                put("data.protein_types", p.n_types.to_string());
                put("data.protein_base_points", p.base_points.to_string());
                put("data.protein_subsample", p.subsample.to_string());
                put("data.protein_noise", fmt_f64(p.noise_sigma));
            }
            DataSource::Directory(d) => {
                put("data.source", "dir".into());
                put("data.dir", d.clone());
            }
        }
        put("filtration.mode", self.filtration.name().into());
        put("filtration.k0", self.k0.to_string());
        put("filtration.q", fmt_f64(self.q));
        put("filtration.t_max", fmt_f64(self.t_max));
        put("filtration.degree", self.degree.to_string());
        put("weightnet.preset", self.weightnet_preset.clone());
        put("weightnet.final_init", fmt_final_init(self.weightnet.final_init));
        put("weightnet.batch_norm", self.weightnet.batch_norm.to_string());
        put("weightnet.dropout", fmt_f64(self.weightnet.dropout_p));
        put("weightnet.clamp", self.weightnet.clamp_nonnegative.to_string());
        put("perslay.centers", self.perslay.n_centers.to_string());
        put("perslay.out_dim", self.perslay.out_dim.to_string());
        put(
            "perslay.coords",
            match self.perslay.coords {
                DiagramCoords::BirthDeath => "birth-death",
                DiagramCoords::BirthPersistence => "birth-persistence",
            }
            .into(),
        );
        put("deepsets.preset", self.deepsets_preset.clone());
        put("deepsets.batch_norm", self.deepsets.batch_norm.to_string());
        put("deepsets.dropout", fmt_f64(self.deepsets.dropout_p));
        put("optim.batch_size", self.batch_size.to_string());
        put("optim.epochs1", self.epochs1.to_string());
        put("optim.epochs2", self.epochs2.to_string());
        put("optim.eta_max1", fmt_f64(self.eta_max1));
        put("optim.eta_max2", fmt_f64(self.eta_max2));
        put("optim.n_warmup", self.n_warmup.to_string());
        put("optim.bn_momentum", fmt_f64(self.bn_momentum));
        m
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return fail("batch size must be at least 1");
        }
        if self.folds < 2 {
            return fail("at least two folds are needed");
        }
        if self.run_folds == 0 || self.run_folds > self.folds {
            return fail("run_folds must lie in 1..=folds");
        }
        if self.degree > 1 {
            return fail("homology degree must be 0 or 1");
        }
        if self.t_max.is_nan() || self.t_max <= 0.0 {
            return fail("t_max must be positive");
        }
        if self.k0 == 0 || !(self.q > 0.0 && self.q.is_finite()) {
            return fail("DTM needs k0 >= 1 and finite q > 0");
        }
        for eta in [self.eta_max1, self.eta_max2] {
            if !(eta.is_finite() && eta > 0.0) {
                return fail("eta_max must be finite and positive");
            }
        }
        if self.n_warmup == 0 {
            return fail("n_warmup must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail("bn_momentum must lie in [0, 1]");
        }
        if self.n_clouds < self.folds && !matches!(self.data, DataSource::Directory(_)) {
            return fail("fewer clouds than folds");
        }
        if self.mode == ExperimentMode::TwoPhase && matches!(self.data, DataSource::Protein(_)) {
            return fail("two-phase training needs coordinates; the protein data has none");
        }
        self.weightnet.validate()?;
        if self.perslay.n_centers == 0 || self.perslay.out_dim == 0 {
            return fail("PersLay sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.deepsets.dropout_p) {
            return fail("DeepSets dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_round_trip() {
        let mut c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_map(&c.to_map()).unwrap(), c);
        c.mode = ExperimentMode::TwoPhase;
        c.filtration = FiltrationMode::Dtm { k0: 5, q: 2.0 };
        c.k0 = 5;
        c.t_max = 0.75;
        c.weightnet_preset = "r4".into();
        c.weightnet = WeightNetConfig::preset("r4").unwrap();
        c.weightnet.final_init = FinalInit::Zero;
        c.perslay.coords = DiagramCoords::BirthPersistence;
        assert_eq!(ExperimentConfig::from_map(&c.to_map()).unwrap(), c);
        c.data = DataSource::Protein(ProteinSpec::default());
        c.mode = ExperimentMode::Classify;
        assert_eq!(ExperimentConfig::from_map(&c.to_map()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_settings() {
        let bad = |k: &str, v: &str| {
            let mut m = BTreeMap::new();
            m.insert(k.to_string(), v.to_string());
            ExperimentConfig::from_map(&m).is_err()
        };
        assert!(bad("optim.batch_size", "0"));
        assert!(bad("experiment.folds", "1"));
        assert!(bad("filtration.mode", "cech"));
        assert!(bad("nonsense.key", "1"));
        assert!(bad("weightnet.preset", "r9"));
        assert!(bad("optim.eta_max1", "NaN"));
        assert!(bad("filtration.t_max", "-1"));
        assert!(bad("weightnet.final_init", "gaussian:x"));
    }
}
