//! Rate-distortion sweep, Pareto front and knee detection.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::train::{mse, train_residual, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::feature_io::FeatureMatrix;
use crate::fsq::{log2_exact, LevelSpec};
use crate::quantizer::{EncodeOptions, ResidualQuantizer, DEFAULT_EPSILON};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub d: usize,
    #[serde(rename = "L")]
    pub levels: u32,
    pub bits: f64,
    pub mse: f64,
    #[serde(default)]
    pub cosine: Option<f64>,
    #[serde(default)]
    pub marginal_efficiency: Option<f64>,
}

/// K·d·log2(L), unrounded.
pub fn exact_bits(stages: usize, dims: usize, levels: u32) -> f64 {
    stages as f64 * dims as f64 * log2_exact(u64::from(levels))
}

/// Non-dominated points under (bits ↑, mse ↓), sorted by bits. Among equal
/// bits only the lowest mse survives.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut sorted: Vec<ParetoPoint> = points.to_vec();
    sorted.sort_by(|a, b| a.bits.total_cmp(&b.bits).then(a.mse.total_cmp(&b.mse)));
    let mut front: Vec<ParetoPoint> = Vec::new();
    for p in sorted {
        if front.last().is_none_or(|last| p.mse < last.mse && p.bits > last.bits) {
            front.push(ParetoPoint {
                marginal_efficiency: None,
                ..p
            });
        }
    }
    front
}

/// Annotates each point after the first with
/// (mse_{i-1} - mse_i) / (bits_i - bits_{i-1}) × 10³.
pub fn marginal_efficiency(front: &[ParetoPoint]) -> Result<Vec<ParetoPoint>> {
    if front.len() < 2 {
        return Err(Error::Precondition(format!(
            "marginal efficiency needs at least 2 points, got {}",
            front.len()
        )));
    }
    let mut out = front.to_vec();
    out[0].marginal_efficiency = None;
    for i in 1..out.len() {
        let db = out[i].bits - out[i - 1].bits;
        if !(db > 0.0) {
            return Err(Error::Precondition(format!(
                "points {} and {i} are not sorted by strictly increasing bits",
                i - 1
            )));
        }
        out[i].marginal_efficiency = Some((out[i - 1].mse - out[i].mse) / db * 1e3);
    }
    Ok(out)
}

/// First interior index whose efficiency is at least twice the next one.
pub fn find_knee(front: &[ParetoPoint]) -> Result<Option<usize>> {
    if front.len() < 3 {
        return Err(Error::Precondition(format!(
            "knee detection needs at least 3 points, got {}",
            front.len()
        )));
    }
    let annotated = marginal_efficiency(front)?;
    let eff = |i: usize| annotated[i].marginal_efficiency.unwrap();
    Ok((1..annotated.len() - 1).find(|&i| eff(i) >= 2.0 * eff(i + 1)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontAnalysis {
    pub front: Vec<ParetoPoint>,
    pub knee: Option<usize>,
    /// One step beyond the knee.
    pub selected: Option<usize>,
}

pub fn analyze(points: &[ParetoPoint]) -> Result<FrontAnalysis> {
    let front = marginal_efficiency(&pareto_front(points))?;
    let knee = if front.len() >= 3 { find_knee(&front)? } else { None };
    Ok(FrontAnalysis {
        selected: knee.map(|k| k + 1),
        knee,
        front,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellMetrics {
    pub mse: f64,
    pub cosine: f64,
    pub zero_norm_frames: usize,
    pub train: TrainReport,
}

#[derive(Debug)]
pub struct RdCell {
    pub d: usize,
    pub levels: u32,
    pub bits: f64,
    pub outcome: Result<CellMetrics>,
}

impl RdCell {
    pub fn point(&self) -> Option<ParetoPoint> {
        self.outcome.as_ref().ok().map(|m| ParetoPoint {
            d: self.d,
            levels: self.levels,
            bits: self.bits,
            mse: m.mse,
            cosine: Some(m.cosine),
            marginal_efficiency: None,
        })
    }
}

/// Mean per-frame cosine similarity, skipping frames where either side has
/// zero norm. Returns (mean, skipped).
pub fn mean_cosine(a: &FeatureMatrix, b: &FeatureMatrix) -> (f64, usize) {
    let (mut total, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for (x, y) in a.rows().zip(b.rows()) {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            skipped += 1;
        } else {
            total += dot / (nx * ny);
            used += 1;
        }
    }
    (if used == 0 { 0.0 } else { total / used as f64 }, skipped)
}

/// Published seven-point emotion front (K = 2); the knee is at d=2, L=2.
pub const REFERENCE_FRONT_CSV: &str = "d,L,mse
1,2,0.4789
1,3,0.4560
2,2,0.2059
3,2,0.1516
4,2,0.1040
3,4,0.0813
4,3,0.0634
";

pub const HOLDOUT_FRACTION: f64 = 0.2;

/// Trains one fresh K-stage quantizer per (d, L) pair on 80% of the frames and
/// scores reconstruction on the held-out rest. Failed cells are kept with
/// their error.
pub fn rd_search(
    data: &FeatureMatrix,
    dims: &[usize],
    levels: &[u32],
    stages: usize,
    cfg: &TrainConfig,
) -> Result<Vec<RdCell>> {
    if dims.is_empty() || levels.is_empty() {
        return Err(Error::Precondition("dims and levels must be nonempty".into()));
    }
    if stages == 0 {
        return Err(Error::Precondition("stage count must be at least 1".into()));
    }
    if data.frames() < 2 {
        return Err(Error::Precondition("rd search needs at least 2 frames".into()));
    }
    let order = Rng::derive(cfg.seed, u64::MAX).permutation(data.frames());
    let n_test = ((data.frames() as f64 * HOLDOUT_FRACTION).round() as usize).clamp(1, data.frames() - 1);
    let (test_idx, train_idx) = order.split_at(n_test);
    let train = data.select_frames(train_idx);
    let test = data.select_frames(test_idx);

    let mut cells = Vec::with_capacity(dims.len() * levels.len());
    for &d in dims {
        for &l in levels {
            let cell_seed = (cells.len() as u64) + 1;
            let outcome = run_cell(&train, &test, d, l, stages, cfg, cell_seed);
            cells.push(RdCell {
                d,
                levels: l,
                bits: exact_bits(stages, d, l),
                outcome,
            });
        }
    }
    Ok(cells)
}

fn run_cell(
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    d: usize,
    l: u32,
    stages: usize,
    cfg: &TrainConfig,
    cell: u64,
) -> Result<CellMetrics> {
    let spec = LevelSpec::new(vec![l; d], d)?;
    let mut init_rng = Rng::derive(cfg.seed, 2 * cell);
    let q = ResidualQuantizer::init(&[(train.dim(), d)], spec, DEFAULT_EPSILON, stages, &mut init_rng)?;
    let cell_cfg = TrainConfig {
        seed: Rng::derive(cfg.seed, 2 * cell + 1).next_u64(),
        ..cfg.clone()
    };
    let (trained, report) = train_residual(train, &q, &cell_cfg)?;
    let recon = trained.quantize_latent(test, &EncodeOptions::default())?.quantized;
    let (cosine, zero_norm_frames) = mean_cosine(&recon, test);
    Ok(CellMetrics {
        mse: mse(&recon, test),
        cosine,
        zero_norm_frames,
        train: report,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    d: usize,
    #[serde(rename = "L")]
    levels: u32,
    #[serde(default)]
    bits: Option<f64>,
    mse: f64,
    #[serde(default)]
    cosine: Option<f64>,
    #[serde(default)]
    marginal_efficiency: Option<f64>,
}

/// Reads `d,L,mse[,cosine]` rows (extra columns such as bits or
/// marginal_efficiency are accepted and ignored); bits are recomputed exactly.
pub fn read_points_csv(reader: impl Read, stages: usize) -> Result<Vec<ParetoPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let row = row.map_err(|e| Error::Csv(format!("row {}: {e}", i + 1)))?;
        if row.d == 0 || row.levels < 2 || !row.mse.is_finite() {
            return Err(Error::Csv(format!("row {}: invalid d={}, L={}, mse={}", i + 1, row.d, row.levels, row.mse)));
        }
        out.push(ParetoPoint {
            d: row.d,
            levels: row.levels,
            bits: exact_bits(stages, row.d, row.levels),
            mse: row.mse,
            cosine: row.cosine,
            marginal_efficiency: None,
        });
    }
    Ok(out)
}

pub fn write_points_csv(points: &[ParetoPoint], analysis: Option<&FrontAnalysis>, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record(["d", "L", "bits", "mse", "cosine", "marginal_efficiency", "pareto", "knee", "selected"])
        .map_err(csv_err)?;
    for p in points {
        let on_front = analysis.and_then(|a| a.front.iter().position(|f| f.d == p.d && f.levels == p.levels));
        let eff = on_front.and_then(|i| analysis.unwrap().front[i].marginal_efficiency);
        let flag = |idx: Option<usize>| u8::from(on_front.is_some() && on_front == idx).to_string();
        w.write_record([
            p.d.to_string(),
            p.levels.to_string(),
            p.bits.to_string(),
            p.mse.to_string(),
            p.cosine.map_or(String::new(), |c| c.to_string()),
            eff.map_or(String::new(), |e| e.to_string()),
            u8::from(on_front.is_some()).to_string(),
            flag(analysis.and_then(|a| a.knee)),
            flag(analysis.and_then(|a| a.selected)),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))
}

/// Aligned text table of the front: d, L, bits, mse, cosine, efficiency.
pub fn format_front(analysis: &FrontAnalysis) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>4} {:>3} {:>8} {:>8} {:>9} {:>10}", "d", "L", "bits", "mse", "cos_sim", "marg_eff");
    for (i, p) in analysis.front.iter().enumerate() {
        let mark = if Some(i) == analysis.knee {
            "*"
        } else if Some(i) == analysis.selected {
            "+"
        } else {
            " "
        };
        let cos = p.cosine.map_or("-".to_string(), |c| format!("{c:.4}"));
        let eff = p.marginal_efficiency.map_or("-".to_string(), |e| format!("{e:.1}"));
        let _ = writeln!(
            s,
            "{mark}{:>3} {:>3} {:>8.4} {:>8.4} {:>9} {:>10}",
            p.d, p.levels, p.bits, p.mse, cos, eff
        );
    }
    match (analysis.knee, analysis.selected) {
        (Some(k), Some(sel)) => {
            let (kp, sp) = (&analysis.front[k], &analysis.front[sel]);
            let _ = writeln!(s, "knee (*): d={} L={}; selected (+): d={} L={}", kp.d, kp.levels, sp.d, sp.levels);
        }
        _ => {
            let _ = writeln!(s, "no knee found");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE: &str = REFERENCE_FRONT_CSV;

    fn p(bits: f64, mse: f64) -> ParetoPoint {
        ParetoPoint { d: 1, levels: 2, bits, mse, cosine: None, marginal_efficiency: None }
    }

    #[test]
    fn table_efficiencies_and_knee() {
        let pts = read_points_csv(TABLE.as_bytes(), 2).unwrap();
        assert!((pts[6].bits - 12.679700005769249).abs() < 1e-12);
        let a = analyze(&pts).unwrap();
        assert_eq!(a.front.len(), 7);
        let printed = [19.6, 301.2, 27.2, 23.8, 5.7, 26.3];
        for (f, want) in a.front[1..].iter().zip(printed) {
            assert!((f.marginal_efficiency.unwrap() - want).abs() <= 0.5);
        }
        let knee = a.knee.unwrap();
        assert_eq!((a.front[knee].d, a.front[knee].levels), (2, 2));
        let sel = a.selected.unwrap();
        assert_eq!((a.front[sel].d, a.front[sel].levels), (3, 2));
        assert!(format_front(&a).contains("knee (*): d=2 L=2; selected (+): d=3 L=2"));
    }

    #[test]
    fn linear_front_has_no_knee() {
        let pts: Vec<_> = (0..6).map(|i| p(i as f64, 1.0 - 0.1 * i as f64)).collect();
        assert_eq!(find_knee(&pts).unwrap(), None);
    }

    #[test]
    fn too_few_points() {
        assert!(marginal_efficiency(&[p(1.0, 1.0)]).is_err());
        assert!(find_knee(&[p(1.0, 1.0), p(2.0, 0.5)]).is_err());
    }

    #[test]
    fn dominated_and_tied_points_removed() {
        let pts = vec![p(2.0, 0.5), p(1.0, 0.6), p(2.0, 0.4), p(3.0, 0.45), p(4.0, 0.1)];
        let f = pareto_front(&pts);
        let got: Vec<(f64, f64)> = f.iter().map(|q| (q.bits, q.mse)).collect();
        assert_eq!(got, vec![(1.0, 0.6), (2.0, 0.4), (4.0, 0.1)]);
    }

    #[test]
    fn cosine_skips_zero_frames() {
        let a = FeatureMatrix::new(3, 2, vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = FeatureMatrix::new(3, 2, vec![2.0, 0.0, 1.0, 1.0, -1.0, -1.0]).unwrap();
        let (c, skipped) = mean_cosine(&a, &b);
        assert_eq!(skipped, 1);
        assert!(c.abs() < 1e-12);
    }

    #[test]
    fn csv_errors() {
        assert!(read_points_csv("d,L,mse\n1,2,abc\n".as_bytes(), 2).is_err());
        assert!(read_points_csv("d,L\n1,2\n".as_bytes(), 2).is_err());
        assert!(read_points_csv("d,L,mse\n1,1,0.5\n".as_bytes(), 2).is_err());
    }

    #[test]
    fn csv_output_columns() {
        let pts = read_points_csv(TABLE.as_bytes(), 2).unwrap();
        let a = analyze(&pts).unwrap();
        let mut buf = Vec::new();
        write_points_csv(&pts, Some(&a), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "d,L,bits,mse,cosine,marginal_efficiency,pareto,knee,selected");
        assert!(lines[3].starts_with("2,2,4,0.2059,,") && lines[3].ends_with(",1,1,0"));
        assert!(lines[4].ends_with(",1,0,1"));
    }

    #[test]
    fn single_cell_sweep() {
        let data = crate::feature_io::gaussian_features(&mut Rng::new(1), 200, 4, 1.0).unwrap();
        let cfg = TrainConfig { iterations: 20, batch_size: 32, ..TrainConfig::default() };
        let cells = rd_search(&data, &[1], &[2], 2, &cfg).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].bits, 2.0);
        assert!(cells[0].outcome.is_ok());
        assert!(rd_search(&data, &[], &[2], 2, &cfg).is_err());
    }
}
