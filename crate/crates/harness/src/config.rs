//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use mpq_core::data::{self, BlobsSpec, ContextSpec, Dataset, PlantedRankSpec};
use mpq_core::model::{Activation, LayerSpec, TrainConfig};
use mpq_core::nas::SearchSchedule;
use mpq_core::quant::{AdmmConfig, RhoSchedule, SUPPORTED_BITS};
use mpq_core::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result, StageContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    pub search: Option<SearchSection>,
    pub quant: Option<QuantSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    Blobs,
    PlantedRank,
    Context,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub generator: Generator,
    /// Fraction of segments held out for testing.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Defaults to the top-level seed.
    pub seed: Option<u64>,
    pub blobs: Option<BlobsSection>,
    pub planted_rank: Option<PlantedRankSection>,
    pub context: Option<ContextSection>,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsSection {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedRankSection {
    pub input_dim: usize,
    pub hidden: usize,
    pub rank: usize,
    pub classes: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSection {
    pub dim: usize,
    pub classes: usize,
    pub segments: usize,
    pub segment_len: usize,
    pub offsets: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input width, hidden widths, number of classes.
    pub dims: Vec<usize>,
    /// Per layer; replaced by the searched values when `[search]` is set.
    pub bottlenecks: Vec<usize>,
    /// Hidden-layer activation. The output layer is always linear.
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Per-layer frame offsets; empty means no splicing.
    #[serde(default)]
    pub context: Vec<Vec<i32>>,
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub semi_orth_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            epochs: d.epochs,
            semi_orth_interval: d.semi_orth_interval,
        }
    }
}

/// Candidate bottlenecks plus the search schedule. The schedule seed is
/// the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    /// Candidate bottlenecks per layer. A single candidate fixes the layer.
    pub choices: Vec<Vec<usize>>,
    pub stage1_epochs: usize,
    pub stage1_patience: usize,
    pub stage2_epochs: usize,
    pub held_out: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub samples: usize,
    pub eta: f64,
    pub weight_lr: f64,
    pub arch_lr: f64,
    pub batch_size: usize,
    pub semi_orth_interval: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = SearchSchedule::default();
        SearchSection {
            choices: Vec::new(),
            stage1_epochs: d.stage1_epochs,
            stage1_patience: d.stage1_patience,
            stage2_epochs: d.stage2_epochs,
            held_out: d.held_out,
            temperature_start: d.temperature_start,
            temperature_end: d.temperature_end,
            samples: d.samples,
            eta: d.eta,
            weight_lr: d.weight_lr,
            arch_lr: d.arch_lr,
            batch_size: d.batch_size,
            semi_orth_interval: d.semi_orth_interval,
        }
    }
}

impl SearchSection {
    pub fn schedule(&self, seed: u64) -> SearchSchedule {
        SearchSchedule {
            stage1_epochs: self.stage1_epochs,
            stage1_patience: self.stage1_patience,
            stage2_epochs: self.stage2_epochs,
            held_out: self.held_out,
            temperature_start: self.temperature_start,
            temperature_end: self.temperature_end,
            samples: self.samples,
            eta: self.eta,
            weight_lr: self.weight_lr,
            arch_lr: self.arch_lr,
            batch_size: self.batch_size,
            semi_orth_interval: self.semi_orth_interval,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Hessian,
    Kl,
    Nas,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Qat,
    ModifiedBp,
    Admm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSection {
    #[serde(default = "default_bits")]
    pub bits: Vec<u32>,
    /// Parameter-weighted average; the uniform method uses it as the width.
    pub target_avg_bits: f64,
    pub method: Method,
    pub scheme: Scheme,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "default_finetune_lr")]
    pub finetune_lr: f64,
    /// ADMM penalty; adapted automatically when absent.
    pub rho: Option<f64>,
    /// Size penalty of the precision search.
    #[serde(default)]
    pub nas_eta: f64,
    /// Also store the full-precision weights in the checkpoint.
    #[serde(default)]
    pub shadow: bool,
}

fn default_bits() -> Vec<u32> {
    SUPPORTED_BITS.to_vec()
}

fn default_probes() -> usize {
    64
}

fn default_finetune_epochs() -> usize {
    10
}

fn default_finetune_lr() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
        }
    }
}

/// Train and test portions of the generated dataset.
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.output.dir = o;
        }
        self
    }

    /// Hex SHA-256 of everything but the output directory.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    fn data_shape(&self) -> (usize, usize) {
        match self.data.generator {
            Generator::Blobs => self.data.blobs.as_ref().map_or((0, 0), |b| (b.dim, b.classes)),
            Generator::PlantedRank => self
                .data
                .planted_rank
                .as_ref()
                .map_or((0, 0), |p| (p.input_dim, p.classes)),
            Generator::Context => self.data.context.as_ref().map_or((0, 0), |c| (c.dim, c.classes)),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.model.dims.len().saturating_sub(1)
    }

    /// Layer shapes with the given bottlenecks.
    pub fn layer_specs(&self, bottlenecks: &[usize]) -> Vec<LayerSpec> {
        let n = self.num_layers();
        (0..n)
            .map(|l| LayerSpec {
                out_dim: self.model.dims[l + 1],
                in_dim: self.model.dims[l],
                bottleneck: bottlenecks[l],
                activation: if l + 1 == n {
                    Activation::Identity
                } else {
                    self.model.activation
                },
                context: self.model.context.get(l).cloned().unwrap_or_default(),
            })
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed: self.seed,
            semi_orth_interval: self.train.semi_orth_interval,
        }
    }

    pub fn search_schedule(&self) -> Option<SearchSchedule> {
        self.search.as_ref().map(|s| s.schedule(self.seed))
    }

    pub fn finetune_config(&self, q: &QuantSection) -> TrainConfig {
        TrainConfig {
            learning_rate: q.finetune_lr,
            epochs: q.finetune_epochs,
            ..self.train_config()
        }
    }

    pub fn admm_config(&self, q: &QuantSection) -> AdmmConfig {
        AdmmConfig {
            train: self.finetune_config(q),
            rho: q.rho.map_or(RhoSchedule::Auto, RhoSchedule::Fixed),
        }
    }

    /// Schedule of the precision search: the `[search]` fields when present,
    /// with the size penalty taken from `[quant]`.
    pub fn precision_schedule(&self, q: &QuantSection) -> SearchSchedule {
        let fields = self.search.clone().unwrap_or_default();
        SearchSchedule {
            eta: q.nas_eta,
            ..fields.schedule(self.seed)
        }
    }

    /// Generates the dataset and splits off the test segments.
    pub fn splits(&self) -> Result<Splits> {
        let seed = self.data_seed();
        let d = &self.data;
        let all = match d.generator {
            Generator::Blobs => {
                let b = d.blobs.as_ref().expect("validated");
                data::blobs(&BlobsSpec {
                    classes: b.classes,
                    dim: b.dim,
                    per_class: b.per_class,
                    separation: b.separation,
                    seed,
                })
            }
            Generator::PlantedRank => {
                let p = d.planted_rank.as_ref().expect("validated");
                data::planted_rank(&PlantedRankSpec {
                    input_dim: p.input_dim,
                    hidden: p.hidden,
                    rank: p.rank,
                    classes: p.classes,
                    samples: p.samples,
                    seed,
                })
                .map(|(ds, _)| ds)
            }
            Generator::Context => {
                let c = d.context.as_ref().expect("validated");
                data::context_sequence(&ContextSpec {
                    dim: c.dim,
                    classes: c.classes,
                    segments: c.segments,
                    segment_len: c.segment_len,
                    offsets: c.offsets.clone(),
                    seed,
                })
            }
        }
        .stage("data")?;
        let (train, test) = all.split(d.test_fraction, &mut Rng::new(seed).split(7)).stage("data")?;
        Ok(Splits { train, test })
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HarnessError::Config(m));
        let d = &self.data;
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return err(format!(
                "data.test_fraction must lie in (0, 1), got {}",
                d.test_fraction
            ));
        }
        let present = [
            (Generator::Blobs, d.blobs.is_some(), "data.blobs"),
            (Generator::PlantedRank, d.planted_rank.is_some(), "data.planted_rank"),
            (Generator::Context, d.context.is_some(), "data.context"),
        ];
        for (g, is_set, name) in present {
            if g == d.generator && !is_set {
                return err(format!("generator {g:?} needs a [{name}] table"));
            }
            if g != d.generator && is_set {
                return err(format!("[{name}] given but generator is {:?}", d.generator));
            }
        }
        match d.generator {
            Generator::Blobs => {
                let b = d.blobs.as_ref().unwrap();
                if b.classes < 2 || b.dim == 0 || b.per_class == 0 || !(b.separation > 0.0 && b.separation.is_finite())
                {
                    return err(format!("invalid [data.blobs] {b:?}"));
                }
            }
            Generator::PlantedRank => {
                let p = d.planted_rank.as_ref().unwrap();
                if p.classes < 2
                    || p.input_dim == 0
                    || p.hidden == 0
                    || p.samples == 0
                    || p.rank == 0
                    || p.rank > p.hidden.min(p.input_dim)
                {
                    return err(format!("invalid [data.planted_rank] {p:?}"));
                }
            }
            Generator::Context => {
                let c = d.context.as_ref().unwrap();
                if c.classes < 2 || c.dim == 0 || c.segments < 2 || c.segment_len == 0 || c.offsets.is_empty() {
                    return err(format!("invalid [data.context] {c:?}"));
                }
            }
        }

        let m = &self.model;
        let layers = self.num_layers();
        if layers == 0 {
            return err("model.dims needs at least an input and an output width".into());
        }
        if m.dims.contains(&0) {
            return err("model.dims must be positive".into());
        }
        let (input, classes) = self.data_shape();
        if m.dims[0] != input || m.dims[layers] != classes {
            return err(format!(
                "model.dims must start at the input width {input} and end at the class count {classes}"
            ));
        }
        if !m.context.is_empty() && m.context.len() != layers {
            return err(format!(
                "model.context has {} entries for {layers} layers",
                m.context.len()
            ));
        }
        if m.bottlenecks.len() != layers {
            return err(format!(
                "model.bottlenecks has {} entries for {layers} layers",
                m.bottlenecks.len()
            ));
        }
        let specs = self.layer_specs(&m.bottlenecks);
        for (l, s) in specs.iter().enumerate() {
            let cap = s.out_dim.min(s.spliced_in_dim());
            if s.bottleneck == 0 || s.bottleneck > cap {
                return err(format!(
                    "model.bottlenecks[{l}] = {} must lie in 1..={cap}",
                    s.bottleneck
                ));
            }
        }

        let t = self.train_config();
        t.validate().map_err(|e| HarnessError::config(format!("[train] {e}")))?;

        if let Some(s) = &self.search {
            if s.choices.len() != layers {
                return err(format!(
                    "search.choices has {} entries for {layers} layers",
                    s.choices.len()
                ));
            }
            for (l, (rs, spec)) in s.choices.iter().zip(&specs).enumerate() {
                let cap = spec.out_dim.min(spec.spliced_in_dim());
                if rs.is_empty() || rs.iter().any(|&r| r == 0 || r > cap) {
                    return err(format!(
                        "search.choices[{l}] = {rs:?} must be non-empty within 1..={cap}"
                    ));
                }
            }
            s.schedule(self.seed)
                .validate()
                .map_err(|e| HarnessError::config(format!("[search] {e}")))?;
        }

        if let Some(q) = &self.quant {
            if q.bits.is_empty() || q.bits.iter().any(|b| !SUPPORTED_BITS.contains(b)) {
                return err(format!(
                    "quant.bits = {:?} must be drawn from {SUPPORTED_BITS:?}",
                    q.bits
                ));
            }
            if q.bits.windows(2).any(|w| w[0] >= w[1]) {
                return err(format!("quant.bits = {:?} must be strictly ascending", q.bits));
            }
            let (lo, hi) = (q.bits[0] as f64, q.bits[q.bits.len() - 1] as f64);
            match q.method {
                Method::Uniform => {
                    if !q.bits.iter().any(|&b| b as f64 == q.target_avg_bits) {
                        return err(format!(
                            "uniform quantization needs target_avg_bits in quant.bits, got {}",
                            q.target_avg_bits
                        ));
                    }
                }
                _ => {
                    if !(q.target_avg_bits >= lo && q.target_avg_bits <= hi) {
                        return err(format!(
                            "quant.target_avg_bits = {} outside [{lo}, {hi}]",
                            q.target_avg_bits
                        ));
                    }
                }
            }
            if q.probes == 0 {
                return err("quant.probes must be positive".into());
            }
            if !(q.finetune_lr >= 0.0 && q.finetune_lr.is_finite()) {
                return err(format!("quant.finetune_lr = {}", q.finetune_lr));
            }
            if let Some(rho) = q.rho {
                if !(rho > 0.0 && rho.is_finite()) {
                    return err(format!("quant.rho = {rho} must be positive"));
                }
            }
            if !(q.nas_eta >= 0.0 && q.nas_eta.is_finite()) {
                return err(format!("quant.nas_eta = {}", q.nas_eta));
            }
            if q.method == Method::Nas {
                self.precision_schedule(q)
                    .validate()
                    .map_err(|e| HarnessError::config(format!("precision search: {e}")))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const BLOBS: &str = r#"
seed = 3

[data]
generator = "blobs"
[data.blobs]
classes = 3
dim = 4
per_class = 20
separation = 6.0

[model]
dims = [4, 8, 3]
bottlenecks = [4, 3]

[train]
epochs = 2
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml(BLOBS).unwrap();
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.output.dir, PathBuf::from("out"));
        assert_eq!(c.data.test_fraction, 0.2);
        let specs = c.layer_specs(&c.model.bottlenecks);
        assert_eq!(specs[0].activation, Activation::Relu);
        assert_eq!(specs[1].activation, Activation::Identity);
    }

    #[test]
    fn unknown_keys_rejected() {
        for extra in [
            "\n[train]\nepoch = 3\n",
            "\nfoo = 1\n",
            "\n[output]\ndir = \"x\"\nformat = \"csv\"\n",
        ] {
            let text = BLOBS.replace("\n[train]\nepochs = 2\n", extra);
            assert!(
                matches!(ExperimentConfig::from_toml(&text), Err(HarnessError::Config(_))),
                "{extra}"
            );
        }
        let text = format!("{BLOBS}\n[search]\nchoices = [[2, 4], [3]]\nstage1_epoch = 2\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn unknown_generator_rejected() {
        let text = BLOBS.replace("generator = \"blobs\"", "generator = \"mnist\"");
        assert!(matches!(
            ExperimentConfig::from_toml(&text),
            Err(HarnessError::Config(_))
        ));
    }

    #[test]
    fn shape_mismatches_rejected() {
        for (from, to) in [
            ("dims = [4, 8, 3]", "dims = [5, 8, 3]"),
            ("dims = [4, 8, 3]", "dims = [4, 8, 2]"),
            ("bottlenecks = [4, 3]", "bottlenecks = [4]"),
            ("bottlenecks = [4, 3]", "bottlenecks = [5, 3]"),
            ("bottlenecks = [4, 3]", "bottlenecks = [0, 3]"),
            ("[data.blobs]", "[data.context]"),
        ] {
            let text = BLOBS.replace(from, to);
            assert!(ExperimentConfig::from_toml(&text).is_err(), "{to}");
        }
    }

    #[test]
    fn quant_section_checked() {
        let ok = "\n[quant]\ntarget_avg_bits = 4.0\nmethod = \"hessian\"\nscheme = \"qat\"\n";
        let c = ExperimentConfig::from_toml(&format!("{BLOBS}{ok}")).unwrap();
        assert_eq!(c.quant.unwrap().bits, vec![1, 2, 4, 8, 16]);
        for bad in [
            "\n[quant]\ntarget_avg_bits = 4.0\nmethod = \"hessian\"\nscheme = \"sgd\"\n",
            "\n[quant]\nbits = [2, 3]\ntarget_avg_bits = 2.0\nmethod = \"kl\"\nscheme = \"qat\"\n",
            "\n[quant]\nbits = [4, 2]\ntarget_avg_bits = 2.0\nmethod = \"kl\"\nscheme = \"qat\"\n",
            "\n[quant]\ntarget_avg_bits = 32.0\nmethod = \"kl\"\nscheme = \"qat\"\n",
            "\n[quant]\ntarget_avg_bits = 3.0\nmethod = \"uniform\"\nscheme = \"qat\"\n",
            "\n[quant]\ntarget_avg_bits = 4.0\nmethod = \"kl\"\nscheme = \"admm\"\nrho = -1.0\n",
        ] {
            assert!(ExperimentConfig::from_toml(&format!("{BLOBS}{bad}")).is_err(), "{bad}");
        }
    }

    #[test]
    fn fingerprint_ignores_output_dir() {
        let a = ExperimentConfig::from_toml(BLOBS).unwrap();
        let b = a.clone().with_overrides(None, Some("elsewhere".into()));
        let c = a.clone().with_overrides(Some(4), None);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn splits_are_deterministic() {
        let c = ExperimentConfig::from_toml(BLOBS).unwrap();
        let a = c.splits().unwrap();
        let b = c.splits().unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test.len(), 12);
    }
}
