//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process fails if any criterion does. Pass criterion numbers as
//! arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use mpq_core::data::{blobs, planted_rank, BlobsSpec, Dataset, PlantedRankSpec};
use mpq_core::diff::{hvp, FnObjective, Objective};
use mpq_core::model::{train, Activation, LayerSpec, Network, NetworkObjective, TrainConfig};
use mpq_core::nas::{gumbel_weights, pipelined_search, SearchSchedule, SuperNet};
use mpq_core::quant::{
    max_code, optimize_scale, quantize_model, train_modified_bp, train_qat, QuantTable, SUPPORTED_BITS,
};
use mpq_core::sensitivity::{
    allocate_bits, hessian_table, hutchinson_trace, kl_table, total_sensitivity, Metric, PrecisionAssignment,
    SensitivityTable,
};
use mpq_core::{Rng, Tensor};
use mpq_harness::checkpoint::{Checkpoint, CheckpointError, HEADER_BYTES, LAYER_OVERHEAD_BYTES};
use mpq_harness::size::megabytes;
use mpq_harness::{compression_ratio, model_size_bytes, ParamCount};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn size_arithmetic() -> Verdict {
    let a = megabytes(model_size_bytes(&ParamCount(18_600_000)));
    let b = megabytes(model_size_bytes(&ParamCount(12_400_000)));
    let r1 = compression_ratio(74.4, 49.6).unwrap();
    let r2 = compression_ratio(180.4, 13.3).unwrap();
    verdict(
        a == 74.4 && b == 49.6 && r1 == 1.5 && r2 == 13.6,
        format!("{a} MB, {b} MB, ratios {r1} and {r2}"),
    )
}

fn quantizer_oracle() -> Verdict {
    let mut failures = 0usize;
    for &bits in &SUPPORTED_BITS {
        let mut rng = Rng::new(u64::from(bits));
        let alpha = rng.uniform_range(0.01, 2.0);
        let table = QuantTable::new(bits, alpha).unwrap();
        let levels = table.levels();
        let reach = alpha * (f64::from(max_code(bits)) + 2.0);
        for _ in 0..100_000 {
            let x = rng.uniform_range(-reach, reach);
            // exhaustive scan of the whole table
            let best = levels.iter().fold(f64::INFINITY, |m, &l| m.min((x - l).abs()));
            let got = (x - table.value(table.nearest_code(x))).abs();
            if got != best {
                failures += 1;
            }
        }
    }
    verdict(failures == 0, format!("{failures} mismatches in 5 x 100000 values"))
}

fn l2(w: &[f64], table: &QuantTable) -> f64 {
    w.iter()
        .map(|&x| {
            let d = x - table.value(table.nearest_code(x));
            d * d
        })
        .sum()
}

fn scale_optimality() -> Verdict {
    let mut wins = 0;
    let mut trials = 0;
    for v in 0..20u64 {
        let mut rng = Rng::new(1000 + v);
        let n = 50 + rng.below(200);
        let w: Vec<f64> = (0..n).map(|_| rng.normal() * rng.uniform_range(0.1, 3.0)).collect();
        let max = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for &bits in &SUPPORTED_BITS {
            let fit = optimize_scale(&w, bits).unwrap();
            let best_random = (0..100)
                .map(|_| l2(&w, &QuantTable::new(bits, rng.uniform_range(1e-3, 2.0) * max).unwrap()))
                .fold(f64::INFINITY, f64::min);
            trials += 1;
            if fit.l2_error <= best_random {
                wins += 1;
            }
        }
    }
    verdict(wins == trials, format!("{wins}/{trials} trials"))
}

fn hutchinson_accuracy() -> Verdict {
    let n = 50;
    let mut rng = Rng::new(4);
    let m = Tensor::matrix(n, n, (0..n * n).map(|_| rng.normal()).collect()).unwrap();
    let mut h = m.matmul(&m.transpose().unwrap()).unwrap();
    h.data_mut().iter_mut().for_each(|v| *v /= n as f64);
    for i in 0..n {
        h.data_mut()[i * n + i] += 1.0 + i as f64 / n as f64;
    }
    let trace: f64 = (0..n).map(|i| h.data()[i * n + i]).sum();
    let mv = |p: &Tensor| h.matmul(&p.clone().reshape(vec![n, 1])?)?.reshape(vec![n]);
    let obj = FnObjective {
        value: |p: &Tensor| Ok(0.5 * p.dot(&mv(p)?)?),
        gradient: |p: &Tensor| mv(p),
    };
    let at = Tensor::from_vec(vec![0.3; n]).unwrap();
    let within = (0..50u64)
        .filter(|&s| {
            let est = hutchinson_trace(&obj, &at, 10_000, &Rng::new(s)).unwrap();
            ((est.mean - trace) / trace).abs() <= 0.05
        })
        .count();
    verdict(within >= 45, format!("{within}/50 seeds within 5% of trace {trace:.3}"))
}

fn small_problem() -> (Network, Tensor, Vec<usize>) {
    let specs = [
        LayerSpec {
            out_dim: 3,
            in_dim: 2,
            bottleneck: 1,
            activation: Activation::Sigmoid,
            context: vec![],
        },
        LayerSpec {
            out_dim: 2,
            in_dim: 3,
            bottleneck: 2,
            activation: Activation::Identity,
            context: vec![],
        },
    ];
    let mut rng = Rng::new(5);
    let net = Network::init(&specs, &mut rng).unwrap();
    let x = Tensor::matrix(8, 2, (0..16).map(|_| rng.normal()).collect()).unwrap();
    let labels = (0..8).map(|i| i % 2).collect();
    (net, x, labels)
}

fn hvp_correctness() -> Verdict {
    let (net, x, labels) = small_problem();
    let obj = NetworkObjective {
        net: &net,
        x: &x,
        labels: &labels,
        seg_len: 8,
    };
    let theta = net.params();
    let p = theta.len();
    // explicit Hessian from second differences of the loss alone
    let h = 1e-4;
    let f = |d: &[(usize, f64)]| {
        let mut t = theta.clone();
        for &(i, s) in d {
            t.data_mut()[i] += s;
        }
        obj.value(&t).unwrap()
    };
    let mut hess = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            hess[i * p + j] = (f(&[(i, h), (j, h)]) - f(&[(i, h), (j, -h)]) - f(&[(i, -h), (j, h)])
                + f(&[(i, -h), (j, -h)]))
                / (4.0 * h * h);
        }
    }
    let mut rng = Rng::new(6);
    let mut worst: f64 = 0.0;
    let mut worst_sym: f64 = 0.0;
    for _ in 0..5 {
        let v = Tensor::from_vec((0..p).map(|_| rng.normal()).collect()).unwrap();
        let u = Tensor::from_vec((0..p).map(|_| rng.normal()).collect()).unwrap();
        let hv = hvp(&obj, &theta, &v).unwrap();
        let hu = hvp(&obj, &theta, &u).unwrap();
        let explicit: Vec<f64> = (0..p)
            .map(|i| (0..p).map(|j| hess[i * p + j] * v.data()[j]).sum())
            .collect();
        let diff = hv
            .data()
            .iter()
            .zip(&explicit)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = explicit.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
        let a = u.dot(&hv).unwrap();
        let b = v.dot(&hu).unwrap();
        worst_sym = worst_sym.max((a - b).abs() / a.abs().max(b.abs()));
    }
    verdict(
        worst <= 1e-3 && worst_sym <= 1e-3 && p <= 20,
        format!("{p} params, rel error {worst:.2e}, asymmetry {worst_sym:.2e}"),
    )
}

fn exhaustive(t: &SensitivityTable, params: &[usize], target: f64) -> Option<f64> {
    let k = t.bits.len();
    let total: u64 = params.iter().map(|&p| p as u64).sum();
    let mut best: Option<f64> = None;
    for mut code in 0..k.pow(params.len() as u32) {
        let mut s = 0.0;
        let mut bits = 0u64;
        for (l, &p) in params.iter().enumerate() {
            let j = code % k;
            code /= k;
            s += t.entries[l][j];
            bits += p as u64 * u64::from(t.bits[j]);
        }
        if bits as f64 <= target * total as f64 && best.is_none_or(|b| s < b) {
            best = Some(s);
        }
    }
    best
}

fn allocation_exactness() -> Verdict {
    let mut agree = 0;
    let mut rng = Rng::new(7);
    for _ in 0..100 {
        let layers = 1 + rng.below(4);
        let mut pool = SUPPORTED_BITS.to_vec();
        let choices = 1 + rng.below(4);
        let mut bits = Vec::new();
        for _ in 0..choices {
            bits.push(pool.remove(rng.below(pool.len())));
        }
        bits.sort_unstable();
        let params: Vec<usize> = (0..layers).map(|_| 1 + rng.below(500)).collect();
        let entries = (0..layers)
            .map(|_| (0..choices).map(|_| rng.uniform() * 10.0).collect())
            .collect();
        let table = SensitivityTable::new(Metric::Kl, bits.clone(), entries, 1).unwrap();
        let target = rng.uniform_range(f64::from(bits[0]) * 0.9, f64::from(bits[choices - 1]) * 1.05);
        let dp = allocate_bits(&table, &params, target);
        let ok = match (exhaustive(&table, &params, target), dp) {
            (None, Err(_)) => true,
            (Some(best), Ok(a)) => {
                let total: u64 = params.iter().map(|&p| p as u64).sum();
                (total_sensitivity(&table, &a).unwrap() - best).abs() <= 1e-9
                    && a.total_bits() as f64 <= target * total as f64
            }
            _ => false,
        };
        agree += usize::from(ok);
    }
    verdict(agree == 100, format!("{agree}/100 instances match enumeration"))
}

const BLOBS_DIMS: [usize; 7] = [8, 64, 16, 64, 16, 32, 4];
const CANDIDATE_BITS: [u32; 5] = [1, 2, 4, 8, 16];

struct BlobsRun {
    net: Network,
    train: Dataset,
    test: Dataset,
}

fn blobs_specs() -> Vec<LayerSpec> {
    let n = BLOBS_DIMS.len() - 1;
    (0..n)
        .map(|l| LayerSpec {
            out_dim: BLOBS_DIMS[l + 1],
            in_dim: BLOBS_DIMS[l],
            bottleneck: BLOBS_DIMS[l + 1].min(BLOBS_DIMS[l]).min(12),
            activation: if l + 1 == n {
                Activation::Identity
            } else {
                Activation::Relu
            },
            context: vec![],
        })
        .collect()
}

fn blobs_runs() -> &'static [BlobsRun] {
    static RUNS: OnceLock<Vec<BlobsRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (0..5u64)
            .map(|seed| {
                let data = blobs(&BlobsSpec {
                    classes: 4,
                    dim: 8,
                    per_class: 150,
                    separation: 4.0,
                    seed,
                })
                .unwrap();
                let (train_set, test) = data.split(0.2, &mut Rng::new(seed).split(7)).unwrap();
                let init = Network::init(&blobs_specs(), &mut Rng::new(seed)).unwrap();
                let cfg = TrainConfig {
                    learning_rate: 0.1,
                    batch_size: 32,
                    epochs: 60,
                    seed,
                    semi_orth_interval: 4,
                };
                let net = train(&init, &train_set, &cfg).unwrap().net;
                BlobsRun {
                    net,
                    train: train_set,
                    test,
                }
            })
            .collect()
    })
}

fn finetune_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.05,
        batch_size: 32,
        epochs: 10,
        seed,
        semi_orth_interval: 4,
    }
}

fn qat_accuracy(run: &BlobsRun, a: &PrecisionAssignment, seed: u64) -> f64 {
    let q = train_qat(&run.net, &run.train, a, &finetune_config(seed))
        .unwrap()
        .quantized;
    run.test.accuracy(&q.dequantize().unwrap()).unwrap()
}

fn mixed_beats_uniform() -> Verdict {
    let (mut uni, mut hes, mut kl) = (Vec::new(), Vec::new(), Vec::new());
    for (seed, run) in blobs_runs().iter().enumerate() {
        let seed = seed as u64;
        let params = run.net.layer_param_counts();
        let th = hessian_table(&run.net, &run.train, &CANDIDATE_BITS, 64, seed).unwrap();
        let tk = kl_table(&run.net, &run.train, &CANDIDATE_BITS).unwrap();
        let a_hes = allocate_bits(&th, &params, 4.0).unwrap();
        let a_kl = allocate_bits(&tk, &params, 4.0).unwrap();
        let a_uni = PrecisionAssignment::uniform(4, params).unwrap();
        uni.push(qat_accuracy(run, &a_uni, seed));
        hes.push(qat_accuracy(run, &a_hes, seed));
        kl.push(qat_accuracy(run, &a_kl, seed));
    }
    let (u, h, k) = (median(uni), median(hes), median(kl));
    verdict(
        h >= u && k >= u,
        format!("median accuracy uniform {u:.4}, hessian {h:.4}, kl {k:.4}"),
    )
}

fn qat_vs_modified_bp() -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;
    for bits in [2u32, 4] {
        let (mut qat, mut bp) = (Vec::new(), Vec::new());
        for (seed, run) in blobs_runs().iter().enumerate() {
            let seed = seed as u64;
            let a = PrecisionAssignment::uniform(bits, run.net.layer_param_counts()).unwrap();
            qat.push(qat_accuracy(run, &a, seed));
            let q = train_modified_bp(&run.net, &run.train, &a, &finetune_config(seed))
                .unwrap()
                .quantized;
            bp.push(run.test.accuracy(&q.dequantize().unwrap()).unwrap());
        }
        let (q, b) = (median(qat), median(bp));
        pass &= q >= b;
        parts.push(format!("{bits}-bit qat {q:.4} vs bp {b:.4}"));
    }
    verdict(pass, parts.join(", "))
}

const RANK_CHOICES: [usize; 4] = [4, 8, 16, 32];

fn searched_rank(seed: u64, eta: f64) -> usize {
    let (data, _) = planted_rank(&PlantedRankSpec {
        input_dim: 32,
        hidden: 48,
        rank: 8,
        classes: 4,
        samples: 2000,
        seed,
    })
    .unwrap();
    let specs = [
        LayerSpec {
            out_dim: 48,
            in_dim: 32,
            bottleneck: 8,
            activation: Activation::Relu,
            context: vec![],
        },
        LayerSpec {
            out_dim: 4,
            in_dim: 48,
            bottleneck: 4,
            activation: Activation::Identity,
            context: vec![],
        },
    ];
    let sn = SuperNet::for_bottlenecks(&specs, &[RANK_CHOICES.to_vec(), vec![4]], &mut Rng::new(seed)).unwrap();
    let sched = SearchSchedule {
        seed,
        eta,
        ..SearchSchedule::default()
    };
    RANK_CHOICES[pipelined_search(&sn, &data, &sched).unwrap().selection[0]]
}

fn search_sanity() -> Verdict {
    let etas = [0.0, 1e-5, 1e-4, 1e-3, 1e-2];
    let ranks: Vec<Vec<usize>> = etas
        .iter()
        .map(|&eta| (0..5).map(|s| searched_rank(s, eta)).collect())
        .collect();
    let hits = ranks[0].iter().filter(|&&r| r >= 8).count();
    let medians: Vec<f64> = ranks
        .iter()
        .map(|rs| median(rs.iter().map(|&r| r as f64).collect()))
        .collect();
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    verdict(
        hits >= 4 && monotone,
        format!("eta=0 keeps r>=8 on {hits}/5 seeds; median r over eta grid {medians:?}"),
    )
}

fn gumbel_limit() -> Verdict {
    let mut rng = Rng::new(10);
    let lg = [0.0, -10.0, -10.0, -10.0];
    let mut wins = 0;
    let mut worst_sum: f64 = 0.0;
    for _ in 0..100 {
        let w = gumbel_weights(&lg, 0.01, &mut rng).unwrap();
        let arg = (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
        wins += usize::from(arg == 0);
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    for _ in 0..10_000 {
        let n = 1 + rng.below(10);
        let lg: Vec<f64> = (0..n).map(|_| rng.normal() * 20.0).collect();
        let t = 10f64.powf(rng.uniform_range(-3.0, 1.0));
        let w = gumbel_weights(&lg, t, &mut rng).unwrap();
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    verdict(
        wins >= 99 && worst_sum <= 1e-12,
        format!("argmax won {wins}/100; worst |sum - 1| = {worst_sum:.1e}"),
    )
}

fn random_network(rng: &mut Rng) -> Network {
    let layers = 1 + rng.below(3);
    let mut dims = vec![1 + rng.below(8)];
    for _ in 0..layers {
        dims.push(1 + rng.below(8));
    }
    let specs: Vec<LayerSpec> = (0..layers)
        .map(|l| {
            let context = if rng.below(3) == 0 { vec![-1, 0, 1] } else { vec![] };
            let k = context.len().max(1);
            LayerSpec {
                out_dim: dims[l + 1],
                in_dim: dims[l],
                bottleneck: 1 + rng.below(dims[l + 1].min(dims[l] * k)),
                activation: Activation::Relu,
                context,
            }
        })
        .collect();
    Network::init(&specs, rng).unwrap()
}

fn checkpoint_round_trip() -> Verdict {
    let mut rng = Rng::new(11);
    let mut exact = 0;
    let mut rejected = [0usize; 6];
    let mut attempted = [0usize; 6];
    for i in 0..1000 {
        let net = random_network(&mut rng);
        let bits: Vec<u32> = (0..net.num_layers())
            .map(|l| SUPPORTED_BITS[(i + l) % SUPPORTED_BITS.len()])
            .collect();
        let a = PrecisionAssignment::new(bits, net.layer_param_counts()).unwrap();
        let q = quantize_model(&net, &a).unwrap();
        let mut ckpt = Checkpoint::from_model(&q);
        if i % 4 == 0 {
            ckpt = ckpt.with_shadow(&net);
        }
        let bytes = ckpt.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        if back == ckpt && back.to_model(&net).unwrap() == q && bytes.len() == ckpt.encoded_len() {
            exact += 1;
        }

        let mut check = |class: usize, data: &[u8], ok: fn(&CheckpointError) -> bool| {
            attempted[class] += 1;
            if Checkpoint::decode(data).as_ref().err().is_some_and(ok) {
                rejected[class] += 1;
            }
        };
        let mut b = bytes.clone();
        b[rng.below(4)] ^= 0x20;
        check(0, &b, |e| matches!(e, CheckpointError::BadMagic { .. }));
        let mut b = bytes.clone();
        b[4] = b[4].wrapping_add(1 + rng.below(200) as u8);
        check(1, &b, |e| matches!(e, CheckpointError::UnsupportedVersion(_)));
        let cut = rng.below(HEADER_BYTES + LAYER_OVERHEAD_BYTES);
        check(2, &bytes[..cut.min(bytes.len() - 1)], |e| {
            matches!(e, CheckpointError::Truncated { .. })
        });
        // first code of the first multi-bit layer set to the unused pattern -2^(n-1)
        let mut off = HEADER_BYTES;
        for rec in &ckpt.layers {
            if rec.bits > 1 {
                let mut b = bytes.clone();
                let p = off + LAYER_OVERHEAD_BYTES;
                match rec.bits {
                    16 => {
                        b[p] = 0;
                        b[p + 1] = 0x80;
                    }
                    n => b[p] = ((u16::from(b[p]) & !((1u16 << n) - 1)) | (1u16 << (n - 1))) as u8,
                }
                check(3, &b, |e| matches!(e, CheckpointError::CodeOutOfRange { index: 0, .. }));
                break;
            }
            off += LAYER_OVERHEAD_BYTES + rec.code_bytes();
        }
        let mut b = bytes.clone();
        b[HEADER_BYTES + 12] = [0u8, 3, 5, 7, 32][rng.below(5)];
        check(4, &b, |e| matches!(e, CheckpointError::UnsupportedBits { .. }));
        let mut b = bytes.clone();
        b.extend_from_slice(&[0xAB; 3]);
        check(5, &b, |e| matches!(e, CheckpointError::TrailingBytes(_)));
    }
    let all_rejected = rejected == attempted;
    verdict(
        exact == 1000 && all_rejected,
        format!("{exact}/1000 bit-exact; rejected {rejected:?} of {attempted:?} (magic, version, truncation, range, bits, trailing)"),
    )
}

fn run_pipeline(config: &Path, out: &Path, jobs: &str) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_mpq"))
        .args(["pipeline", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--jobs", jobs])
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&o.stderr).into_owned())
    }
}

fn bundle(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn determinism() -> Verdict {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/blobs.toml");
    let tmp = tempfile::tempdir().unwrap();
    let mut bundles = Vec::new();
    for (i, jobs) in ["1", "1", "8", "8"].iter().enumerate() {
        let out = tmp.path().join(format!("run{i}"));
        if let Err(e) = run_pipeline(&config, &out, jobs) {
            return verdict(false, format!("pipeline failed at --jobs {jobs}: {e}"));
        }
        bundles.push(bundle(&out));
    }
    let names: Vec<&str> = bundles[0].iter().map(|(n, _)| n.as_str()).collect();
    let required = ["report.csv", "summary.txt", "model.mpq"];
    let complete = required.iter().all(|r| names.contains(r));
    let same = bundles.iter().all(|b| *b == bundles[0]);
    verdict(
        complete && same,
        format!(
            "{} files identical across two runs each at --jobs 1 and --jobs 8",
            names.len()
        ),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

const CRITERIA: [Criterion; 12] = [
    ("size arithmetic", size_arithmetic),
    ("quantizer oracle equivalence", quantizer_oracle),
    ("scale optimality", scale_optimality),
    ("hutchinson accuracy", hutchinson_accuracy),
    ("hvp correctness", hvp_correctness),
    ("allocation exactness", allocation_exactness),
    ("mixed precision beats uniform", mixed_beats_uniform),
    ("qat at least modified bp", qat_vs_modified_bp),
    ("architecture search sanity", search_sanity),
    ("gumbel limit", gumbel_limit),
    ("checkpoint round trip", checkpoint_round_trip),
    ("pipeline determinism", determinism),
];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        println!(
            "criterion {n:>2} {name}: {} ({}; {secs:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
