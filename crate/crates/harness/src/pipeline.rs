//! Stage-by-stage experiment runner.
//!
//! Every stage writes `<out>/stages/<name>.json` holding the config
//! fingerprint and the stage output. With `resume` set, a stage whose file
//! carries the current fingerprint is loaded instead of recomputed.

use std::path::{Path, PathBuf};

use mpq_core::model::{train, Network};
use mpq_core::nas::{pipelined_search, precision_nas, SuperNet};
use mpq_core::quant::{quantize_model, train_admm, train_modified_bp, train_qat, QuantizedModel};
use mpq_core::sensitivity::{
    allocate_bits, hessian_table, kl_table, total_sensitivity, PrecisionAssignment, SensitivityTable,
};
use mpq_core::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Method, QuantSection, Scheme, Splits};
use crate::error::{HarnessError, Result, StageContext};
use crate::io::write_atomic;
use crate::report::{self, QuantSummary, ReportInput};
use crate::size::SizeReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Train,
    Search,
    Retrain,
    Sensitivity,
    Allocate,
    Quantize,
    Finetune,
    Encode,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Search => "search",
            Stage::Retrain => "retrain",
            Stage::Sensitivity => "sensitivity",
            Stage::Allocate => "allocate",
            Stage::Quantize => "quantize",
            Stage::Finetune => "finetune",
            Stage::Encode => "encode",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub net: Network,
    pub losses: Vec<f64>,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub selection: Vec<usize>,
    pub bottlenecks: Vec<usize>,
    pub log_gamma: Vec<Vec<Vec<f64>>>,
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
    pub temperatures: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub kl: SensitivityTable,
    pub hessian: SensitivityTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocateRecord {
    pub assignment: PrecisionAssignment,
    pub weighted_avg_bits: f64,
    pub total_kl: f64,
    pub total_hessian: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantRecord {
    pub model: QuantizedModel,
    /// Training losses, or primal residuals for ADMM. Empty offline.
    pub trace: Vec<f64>,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeRecord {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Envelope<T> {
    stage: String,
    fingerprint: String,
    output: T,
}

/// What a run did, stage by stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub computed: Vec<Stage>,
    pub reused: Vec<Stage>,
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    fingerprint: String,
    resume: bool,
    log: RunLog,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, resume: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline {
            fingerprint: cfg.fingerprint(),
            cfg,
            resume,
            log: RunLog::default(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.cfg.output.dir
    }

    pub fn stage_path(&self, stage: Stage) -> PathBuf {
        self.out_dir().join("stages").join(format!("{}.json", stage.name()))
    }

    fn load<T: DeserializeOwned>(&self, stage: Stage) -> Option<T> {
        let bytes = std::fs::read(self.stage_path(stage)).ok()?;
        let env: Envelope<T> = serde_json::from_slice(&bytes).ok()?;
        (env.fingerprint == self.fingerprint && env.stage == stage.name()).then_some(env.output)
    }

    fn stage<T: Serialize + DeserializeOwned>(
        &mut self,
        stage: Stage,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        if self.resume {
            if let Some(t) = self.load(stage) {
                self.log.reused.push(stage);
                return Ok(t);
            }
        }
        let output = compute()?;
        let env = Envelope {
            stage: stage.name().to_string(),
            fingerprint: self.fingerprint.clone(),
            output,
        };
        let path = self.stage_path(stage);
        let json = serde_json::to_vec_pretty(&env).map_err(|e| HarnessError::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        write_atomic(&path, &json).map_err(|e| HarnessError::io(&path, e))?;
        self.log.computed.push(stage);
        Ok(env.output)
    }

    /// Runs every stage up to and including `until`.
    pub fn run(mut self, until: Stage) -> Result<RunLog> {
        let cfg = self.cfg.clone();
        let Splits { train: data, test } = cfg.splits()?;
        let seed = cfg.seed;

        let base = self.stage(Stage::Train, || {
            let specs = cfg.layer_specs(&cfg.model.bottlenecks);
            fit(&specs, &data, &test, &cfg, Rng::new(seed).split(11), Stage::Train)
        })?;
        if until == Stage::Train {
            return Ok(self.log);
        }

        let (net, bottlenecks, fp_accuracy) = match (&cfg.search, cfg.search_schedule()) {
            (Some(section), Some(sched)) => {
                let found = self.stage(Stage::Search, || {
                    let specs = cfg.layer_specs(&cfg.model.bottlenecks);
                    let sn = SuperNet::for_bottlenecks(&specs, &section.choices, &mut Rng::new(seed).split(12))
                        .stage("search")?;
                    let out = pipelined_search(&sn, &data, &sched).stage("search")?;
                    Ok(SearchRecord {
                        bottlenecks: out
                            .selection
                            .iter()
                            .zip(&section.choices)
                            .map(|(&i, rs)| rs[i])
                            .collect(),
                        selection: out.selection,
                        log_gamma: out.trajectory,
                        stage1_losses: out.stage1_losses,
                        stage2_losses: out.stage2_losses,
                        temperatures: out.temperatures,
                    })
                })?;
                if until == Stage::Search {
                    return Ok(self.log);
                }
                let re = self.stage(Stage::Retrain, || {
                    let specs = cfg.layer_specs(&found.bottlenecks);
                    fit(&specs, &data, &test, &cfg, Rng::new(seed).split(13), Stage::Retrain)
                })?;
                (re.net, found.bottlenecks, re.test_accuracy)
            }
            _ => {
                if matches!(until, Stage::Search | Stage::Retrain) {
                    return Err(HarnessError::config("architecture search needs a [search] section"));
                }
                (base.net, cfg.model.bottlenecks.clone(), base.test_accuracy)
            }
        };
        if until == Stage::Retrain {
            return Ok(self.log);
        }

        let params: Vec<u64> = net.layer_param_counts().iter().map(|&p| p as u64).collect();
        let generator = name_of(cfg.data.generator);
        let mut input = ReportInput {
            generator: &generator,
            seed,
            bottlenecks: &bottlenecks,
            params: &params,
            fp_accuracy,
            quant: None,
        };

        let Some(q) = cfg.quant.clone() else {
            if until != Stage::Report {
                return Err(HarnessError::config("quantization stages need a [quant] section"));
            }
            report::write(self.out_dir(), &input)?;
            self.log.computed.push(Stage::Report);
            return Ok(self.log);
        };

        let sens = self.stage(Stage::Sensitivity, || {
            Ok(SensitivityRecord {
                kl: kl_table(&net, &data, &q.bits).stage("sensitivity")?,
                hessian: hessian_table(&net, &data, &q.bits, q.probes, seed).stage("sensitivity")?,
            })
        })?;
        if until == Stage::Sensitivity {
            return Ok(self.log);
        }

        let alloc = self.stage(Stage::Allocate, || allocate(&cfg, &q, &net, &data, &sens))?;
        if until == Stage::Allocate {
            return Ok(self.log);
        }

        let offline = self.stage(Stage::Quantize, || {
            let model = quantize_model(&net, &alloc.assignment).stage("quantize")?;
            let acc = accuracy(&model, &test, "quantize")?;
            Ok(QuantRecord {
                model,
                trace: Vec::new(),
                test_accuracy: acc,
            })
        })?;
        if until == Stage::Quantize {
            return Ok(self.log);
        }

        let tuned = self.stage(Stage::Finetune, || {
            finetune(&cfg, &q, &net, &data, &test, &alloc.assignment)
        })?;
        if until == Stage::Finetune {
            return Ok(self.log);
        }

        let mut ckpt = Checkpoint::from_model(&tuned.model);
        if q.shadow {
            ckpt = ckpt.with_shadow(&net);
        }
        let file = self.out_dir().join("model.mpq");
        // a reused encode record is only good while the file it describes is intact
        let resume = self.resume;
        self.resume &= self
            .load::<EncodeRecord>(Stage::Encode)
            .is_some_and(|r| std::fs::read(&file).is_ok_and(|b| hex(&Sha256::digest(&b)) == r.sha256));
        let encoded = self.stage(Stage::Encode, || {
            let bytes = ckpt.encode()?;
            write_atomic(&file, &bytes).map_err(|e| HarnessError::io(&file, e))?;
            let on_disk = std::fs::read(&file).map_err(|e| HarnessError::io(&file, e))?;
            if Checkpoint::decode(&on_disk)? != ckpt || on_disk.len() != ckpt.encoded_len() {
                return Err(HarnessError::Format {
                    path: file.display().to_string(),
                    reason: "checkpoint does not read back identically".into(),
                });
            }
            Ok(EncodeRecord {
                file: "model.mpq".into(),
                bytes: on_disk.len() as u64,
                sha256: hex(&Sha256::digest(&on_disk)),
            })
        });
        self.resume = resume;
        encoded?;
        if until == Stage::Encode {
            return Ok(self.log);
        }

        let size = SizeReport::from_bits(&params, alloc.assignment.bits())?;
        let method = name_of(q.method);
        let scheme = name_of(q.scheme);
        input.quant = Some(QuantSummary {
            method: &method,
            scheme: &scheme,
            size: &size,
            kl: &sens.kl,
            hessian: &sens.hessian,
            offline_accuracy: offline.test_accuracy,
            finetuned_accuracy: tuned.test_accuracy,
            shadow_bytes: (ckpt.encoded_len() as u64).saturating_sub(size.total_bytes),
        });
        report::write(self.out_dir(), &input)?;
        self.log.computed.push(Stage::Report);
        Ok(self.log)
    }
}

fn name_of<T: Serialize>(v: T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn fit(
    specs: &[mpq_core::model::LayerSpec],
    data: &mpq_core::data::Dataset,
    test: &mpq_core::data::Dataset,
    cfg: &ExperimentConfig,
    mut rng: Rng,
    stage: Stage,
) -> Result<TrainRecord> {
    let name = stage.name();
    let init = Network::init(specs, &mut rng).stage(name)?;
    let out = train(&init, data, &cfg.train_config()).stage(name)?;
    let test_accuracy = test.accuracy(&out.net).stage(name)?;
    Ok(TrainRecord {
        net: out.net,
        losses: out.losses,
        test_accuracy,
    })
}

fn accuracy(model: &QuantizedModel, test: &mpq_core::data::Dataset, stage: &'static str) -> Result<f64> {
    test.accuracy(&model.dequantize().stage(stage)?).stage(stage)
}

fn allocate(
    cfg: &ExperimentConfig,
    q: &QuantSection,
    net: &Network,
    data: &mpq_core::data::Dataset,
    sens: &SensitivityRecord,
) -> Result<AllocateRecord> {
    const S: &str = "allocate";
    let params = net.layer_param_counts();
    let assignment = match q.method {
        Method::Hessian => allocate_bits(&sens.hessian, &params, q.target_avg_bits).stage(S)?,
        Method::Kl => allocate_bits(&sens.kl, &params, q.target_avg_bits).stage(S)?,
        Method::Uniform => PrecisionAssignment::uniform(q.target_avg_bits as u32, params).stage(S)?,
        Method::Nas => {
            precision_nas(net, data, &q.bits, &cfg.precision_schedule(q), &cfg.admm_config(q))
                .stage(S)?
                .assignment
        }
    };
    Ok(AllocateRecord {
        weighted_avg_bits: assignment.weighted_avg_bits(),
        total_kl: total_sensitivity(&sens.kl, &assignment).stage(S)?,
        total_hessian: total_sensitivity(&sens.hessian, &assignment).stage(S)?,
        assignment,
    })
}

fn finetune(
    cfg: &ExperimentConfig,
    q: &QuantSection,
    net: &Network,
    data: &mpq_core::data::Dataset,
    test: &mpq_core::data::Dataset,
    assignment: &PrecisionAssignment,
) -> Result<QuantRecord> {
    const S: &str = "finetune";
    let tc = cfg.finetune_config(q);
    let (model, trace) = match q.scheme {
        Scheme::Qat => {
            let o = train_qat(net, data, assignment, &tc).stage(S)?;
            (o.quantized, o.losses)
        }
        Scheme::ModifiedBp => {
            let o = train_modified_bp(net, data, assignment, &tc).stage(S)?;
            (o.quantized, o.losses)
        }
        Scheme::Admm => {
            let o = train_admm(net, data, assignment, &cfg.admm_config(q)).stage(S)?;
            (o.quantized, o.residuals)
        }
    };
    let test_accuracy = accuracy(&model, test, S)?;
    Ok(QuantRecord {
        model,
        trace,
        test_accuracy,
    })
}
