//! Labelled frame datasets and the synthetic generators used for
//! experiments: Gaussian blobs, a planted-rank teacher task and a spliced
//! context sequence task.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, FactoredLayer, LayerSpec, Network};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Rows of `x` with class labels. Rows come in consecutive segments of
/// `segment_len` frames (1 for independent samples); batching and
/// splitting never break a segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub segment_len: usize,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Vec<usize>, classes: usize, segment_len: usize) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} labels for data of shape {:?}",
                labels.len(),
                x.shape()
            )));
        }
        if segment_len == 0 || !x.rows().is_multiple_of(segment_len) {
            return Err(Error::dim(format!(
                "{} rows do not split into segments of {segment_len}",
                x.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Label { label: bad, classes });
        }
        Ok(Dataset {
            x,
            labels,
            classes,
            segment_len,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn segments(&self) -> usize {
        self.len() / self.segment_len
    }

    fn rows_of(&self, segments: &[usize]) -> Vec<usize> {
        let s = self.segment_len;
        segments.iter().flat_map(|&u| u * s..(u + 1) * s).collect()
    }

    pub fn subset(&self, segments: &[usize]) -> Result<Dataset> {
        let rows = self.rows_of(segments);
        let x = self.x.select_rows(&rows)?;
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Dataset::new(x, labels, self.classes, self.segment_len)
    }

    /// Shuffled mini-batches of roughly `batch_size` rows (whole segments).
    pub fn batches(&self, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        let per = (batch_size / self.segment_len).max(1);
        rng.permutation(self.segments())
            .chunks(per)
            .map(|c| self.rows_of(c))
            .collect()
    }

    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((
            self.x.select_rows(rows)?,
            rows.iter().map(|&r| self.labels[r]).collect(),
        ))
    }

    /// Random disjoint split; `fraction` of the segments go to the second set.
    pub fn split(&self, fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::invalid(format!("split fraction {fraction}")));
        }
        let n = self.segments();
        let held = (fraction * n as f64).round() as usize;
        if held == 0 || held >= n {
            return Err(Error::invalid(format!(
                "split of {n} segments at {fraction} leaves an empty side"
            )));
        }
        let perm = rng.permutation(n);
        let mut keep = perm[held..].to_vec();
        let mut out = perm[..held].to_vec();
        keep.sort_unstable();
        out.sort_unstable();
        Ok((self.subset(&keep)?, self.subset(&out)?))
    }

    pub fn loss(&self, net: &Network) -> Result<f64> {
        net.loss(&self.x, &self.labels, self.segment_len)
    }

    pub fn accuracy(&self, net: &Network) -> Result<f64> {
        net.accuracy(&self.x, &self.labels, self.segment_len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobsSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Minimum distance between class centres, in units of the (unit)
    /// within-class standard deviation.
    pub separation: f64,
    pub seed: u64,
}

/// Isotropic unit-variance Gaussian clusters whose centres lie on a sphere,
/// scaled so the closest pair of centres is `separation` apart. Equal centre
/// norms make nearest-centre classification linear without a bias term.
pub fn blobs(spec: &BlobsSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.dim == 0 || spec.per_class == 0 || !(spec.separation > 0.0) {
        return Err(Error::invalid(format!("blobs spec {spec:?}")));
    }
    let centres = blob_centres(spec)?;
    let mut rng = Rng::new(spec.seed).split(1);
    let n = spec.classes * spec.per_class;
    let order = rng.permutation(n);
    let mut x = vec![0.0; n * spec.dim];
    let mut labels = vec![0; n];
    for (slot, &i) in order.iter().enumerate() {
        let c = i / spec.per_class;
        labels[slot] = c;
        for (j, v) in x[slot * spec.dim..(slot + 1) * spec.dim].iter_mut().enumerate() {
            *v = centres[c][j] + rng.normal();
        }
    }
    Dataset::new(Tensor::matrix(n, spec.dim, x)?, labels, spec.classes, 1)
}

pub fn blob_centres(spec: &BlobsSpec) -> Result<Vec<Vec<f64>>> {
    let mut rng = Rng::new(spec.seed).split(0);
    let dirs: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.normal()).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / n).collect()
        })
        .collect();
    let mut min_dist = f64::INFINITY;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            let d = dirs[i]
                .iter()
                .zip(&dirs[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    if !(min_dist > 1e-9) {
        return Err(Error::invalid("degenerate blob centres"));
    }
    let radius = spec.separation / min_dist;
    Ok(dirs
        .into_iter()
        .map(|v| v.into_iter().map(|a| a * radius).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRankSpec {
    pub input_dim: usize,
    pub hidden: usize,
    /// Bottleneck of the teacher's first layer.
    pub rank: usize,
    pub classes: usize,
    pub samples: usize,
    pub seed: u64,
}

/// Labels are the argmax of a random two-layer teacher whose first layer has
/// rank `spec.rank`. Returns the dataset and the teacher.
pub fn planted_rank(spec: &PlantedRankSpec) -> Result<(Dataset, Network)> {
    if spec.samples == 0 || spec.classes < 2 {
        return Err(Error::invalid(format!("planted-rank spec {spec:?}")));
    }
    let rng = Rng::new(spec.seed);
    let gauss = |r: usize, c: usize, s: f64, rng: &mut Rng| {
        Tensor::matrix(r, c, (0..r * c).map(|_| s * rng.normal()).collect())
    };
    let mut trng = rng.split(0);
    let a1 = gauss(spec.hidden, spec.rank, 1.0, &mut trng)?;
    let b1 = gauss(
        spec.rank,
        spec.input_dim,
        1.0 / (spec.input_dim as f64).sqrt(),
        &mut trng,
    )?;
    let r2 = spec.classes.min(spec.hidden);
    let a2 = gauss(spec.classes, r2, 1.0, &mut trng)?;
    let b2 = gauss(r2, spec.hidden, 1.0 / (spec.hidden as f64).sqrt(), &mut trng)?;
    let teacher = Network::new(vec![
        FactoredLayer::new(a1, b1, Activation::Relu, vec![])?,
        FactoredLayer::new(a2, b2, Activation::Identity, vec![])?,
    ])?;
    let mut xrng = rng.split(1);
    let x = gauss(spec.samples, spec.input_dim, 1.0, &mut xrng)?;
    let labels = teacher.predict(&x, spec.samples)?;
    Ok((Dataset::new(x, labels, spec.classes, 1)?, teacher))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub dim: usize,
    pub classes: usize,
    pub segments: usize,
    pub segment_len: usize,
    /// Frame offsets the label depends on.
    pub offsets: Vec<i32>,
    pub seed: u64,
}

/// Sequence task: frames are i.i.d. Gaussian and the label of frame `t` is
/// the argmax of a random linear map of the frames at `t + offsets`.
pub fn context_sequence(spec: &ContextSpec) -> Result<Dataset> {
    if spec.offsets.is_empty() || spec.segments == 0 || spec.segment_len == 0 || spec.classes < 2 {
        return Err(Error::invalid(format!("context spec {spec:?}")));
    }
    let rng = Rng::new(spec.seed);
    let k = spec.offsets.len();
    let n = spec.segments * spec.segment_len;
    let mut wrng = rng.split(0);
    let w = Tensor::matrix(
        spec.classes,
        spec.dim * k,
        (0..spec.classes * spec.dim * k).map(|_| wrng.normal()).collect(),
    )?;
    let mut xrng = rng.split(1);
    let x = Tensor::matrix(n, spec.dim, (0..n * spec.dim).map(|_| xrng.normal()).collect())?;
    let spliced = crate::model::splice(&x, &spec.offsets, spec.segment_len)?;
    let labels = spliced.matmul_t(&w)?.argmax_rows();
    Dataset::new(x, labels, spec.classes, spec.segment_len)
}

/// Spec for a context-task student layer, convenient for tests.
pub fn context_layer_spec(spec: &ContextSpec, out_dim: usize, bottleneck: usize) -> LayerSpec {
    LayerSpec {
        out_dim,
        in_dim: spec.dim,
        bottleneck,
        activation: Activation::Relu,
        context: spec.offsets.clone(),
    }
}
