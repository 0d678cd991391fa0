//! OLS leakage probe: regress a target signal on discrete code values and
//! report held-out R².

use nalgebra::DMatrix;

use crate::bitstream::TokenStream;
use crate::error::{Error, Result};
use crate::feature_io::FeatureMatrix;
use crate::fsq::code_value;
use crate::rng::Rng;

pub const TIKHONOV: f64 = 1e-8;
const COLLINEARITY: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub r2_global: f64,
    pub r2_per_target_mean: f64,
    pub r2_per_target_median: f64,
    /// Same fit after permuting every column of X independently.
    pub r2_random_baseline: f64,
    pub r2_train_global: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_features: usize,
    /// Targets with zero test variance, left out of the per-target statistics.
    pub excluded_targets: Vec<usize>,
    /// Feature columns constant over the training rows, dropped before the fit.
    pub constant_feature_columns: Vec<usize>,
    /// Set when the features are grid values rather than strict ±1 codes.
    pub general_levels: bool,
}

impl ProbeReport {
    pub fn train_test_gap(&self) -> f64 {
        self.r2_train_global - self.r2_global
    }
}

struct Fit {
    coef: DMatrix<f64>,
    columns: Vec<usize>,
}

fn design(x: &FeatureMatrix, rows: &[usize], columns: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), columns.len() + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            x.get(rows[i], columns[j - 1])
        }
    })
}

fn targets(y: &FeatureMatrix, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), y.dim(), |i, j| y.get(rows[i], j))
}

fn fit(x: &FeatureMatrix, y: &FeatureMatrix, train: &[usize], columns: Vec<usize>) -> Result<Fit> {
    let a = design(x, train, &columns);
    let b = targets(y, train);
    let mut gram = a.transpose() * &a;
    for i in 0..gram.nrows() {
        gram[(i, i)] += TIKHONOV;
    }
    let rhs = a.transpose() * b;
    let diag: Vec<f64> = gram.diagonal().iter().copied().collect();
    let chol = gram.cholesky().ok_or_else(|| {
        Error::RankDeficient(format!(
            "normal equations with {} regressors are not positive definite",
            columns.len() + 1
        ))
    })?;
    // A pivot that is tiny next to its Gram diagonal means the regressor is
    // (numerically) a combination of the earlier ones.
    let l = chol.l();
    for (i, &g) in diag.iter().enumerate() {
        if l[(i, i)] * l[(i, i)] < COLLINEARITY * g {
            let what = if i == 0 { "intercept".to_string() } else { format!("feature column {}", columns[i - 1]) };
            return Err(Error::RankDeficient(format!("{what} is collinear with earlier regressors")));
        }
    }
    let coef = chol.solve(&rhs);
    if coef.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient("non-finite OLS coefficients".into()));
    }
    Ok(Fit { coef, columns })
}

struct Scores {
    global: f64,
    per_target: Vec<f64>,
    excluded: Vec<usize>,
}

fn score(fit: &Fit, x: &FeatureMatrix, y: &FeatureMatrix, rows: &[usize]) -> Result<Scores> {
    let pred = design(x, rows, &fit.columns) * &fit.coef;
    let obs = targets(y, rows);
    let n = rows.len() as f64;
    let (mut sse_all, mut sst_all) = (0.0, 0.0);
    let mut per_target = Vec::new();
    let mut excluded = Vec::new();
    for q in 0..obs.ncols() {
        let col = obs.column(q);
        let mean = col.sum() / n;
        let sst: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
        let scale = col.iter().map(|v| v * v).sum::<f64>().max(1.0);
        if sst <= 1e-12 * scale {
            excluded.push(q);
            continue;
        }
        let sse: f64 = col
            .iter()
            .zip(pred.column(q).iter())
            .map(|(o, p)| (o - p) * (o - p))
            .sum();
        sse_all += sse;
        sst_all += sst;
        per_target.push(1.0 - sse / sst);
    }
    if per_target.is_empty() {
        return Err(Error::DegenerateTarget(
            "every target column is constant on the evaluated rows".into(),
        ));
    }
    Ok(Scores {
        global: 1.0 - sse_all / sst_all,
        per_target,
        excluded,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn varying_columns(x: &FeatureMatrix, rows: &[usize]) -> (Vec<usize>, Vec<usize>) {
    (0..x.dim()).partition(|&j| {
        let first = x.get(rows[0], j);
        rows.iter().any(|&r| x.get(r, j) != first)
    })
}

/// Fits `Y ≈ [1, X]·B` on a random `split` fraction of the rows and scores it
/// on the rest.
pub fn ols_r2(x: &FeatureMatrix, y: &FeatureMatrix, split: f64, rng: &mut Rng) -> Result<ProbeReport> {
    let n = x.frames();
    if y.frames() != n {
        return Err(Error::Shape(format!("X has {n} rows, Y has {}", y.frames())));
    }
    let p = x.dim();
    if n < p + 2 {
        return Err(Error::Precondition(format!("need at least {} rows for {p} features, got {n}", p + 2)));
    }
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::Precondition(format!("split must be in (0, 1), got {split}")));
    }
    let n_train = ((split * n as f64).round() as usize).clamp(p + 1, n - 1);
    let order = rng.permutation(n);
    let (train, test) = order.split_at(n_train);

    let (columns, constant) = varying_columns(x, train);
    let model = fit(x, y, train, columns.clone())?;
    let test_scores = score(&model, x, y, test)?;
    let train_scores = score(&model, x, y, train)?;

    let mut shuffled = x.clone();
    for j in 0..p {
        let perm = rng.permutation(n);
        let col: Vec<f64> = perm.iter().map(|&i| x.get(i, j)).collect();
        for (i, v) in col.into_iter().enumerate() {
            shuffled.frame_mut(i)[j] = v;
        }
    }
    let baseline_model = fit(&shuffled, y, train, columns)?;
    let baseline = score(&baseline_model, &shuffled, y, test)?;

    let mut per_target = test_scores.per_target;
    let mean = per_target.iter().sum::<f64>() / per_target.len() as f64;
    Ok(ProbeReport {
        r2_global: test_scores.global,
        r2_per_target_mean: mean,
        r2_per_target_median: median(&mut per_target),
        r2_random_baseline: baseline.global,
        r2_train_global: train_scores.global,
        n_train,
        n_test: test.len(),
        n_features: p,
        excluded_targets: test_scores.excluded,
        constant_feature_columns: constant,
        general_levels: false,
    })
}

/// Which partition's code values a probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Emotion,
    Acoustic,
}

/// Per frame, the grid values of one partition's codes at every stage,
/// concatenated stage-major.
pub fn partition_code_values(ts: &TokenStream, partition: Partition) -> Result<FeatureMatrix> {
    let levels = ts.levels();
    let range = match partition {
        Partition::Emotion => 0..levels.emotion_dims(),
        Partition::Acoustic => levels.emotion_dims()..levels.dims(),
    };
    let width = range.len() * ts.stages();
    if width == 0 {
        return Err(Error::Precondition("partition has no FSQ dimensions".into()));
    }
    let mut data = Vec::with_capacity(ts.frames() * width);
    for t in 0..ts.frames() {
        for &token in ts.tokens().frame(t) {
            let codes = levels.unpack_index(token)?;
            for j in range.clone() {
                data.push(code_value(codes[j], levels.levels()[j])?);
            }
        }
    }
    FeatureMatrix::new(ts.frames(), width, data)
}

/// Emotion-partition code values as a strict ±1 feature vector. Every
/// emotion dimension must be binary.
pub fn extract_probe_features(ts: &TokenStream) -> Result<FeatureMatrix> {
    let levels = ts.levels();
    if let Some(&l) = levels.levels()[..levels.emotion_dims()].iter().find(|&&l| l != 2) {
        return Err(Error::Precondition(format!(
            "the ±1 probe needs binary emotion dimensions, found L={l}"
        )));
    }
    partition_code_values(ts, Partition::Emotion)
}
