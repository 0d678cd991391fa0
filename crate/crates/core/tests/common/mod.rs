//! Straight-through gradient checks against a dense Jacobian and against
//! central differences of a frozen-offset surrogate.

use bdrfsq::feature_io::FeatureMatrix;
use bdrfsq::fsq::LevelSpec;
use bdrfsq::matrix::Matrix;
use bdrfsq::quantizer::{flatten_stage_grads, softplus, EncodeOptions, EncodeResult, ResidualQuantizer};
use bdrfsq::Rng;

struct Case {
    q: ResidualQuantizer,
    u: FeatureMatrix,
    upstream: FeatureMatrix,
    active: usize,
}

fn near_boundary(q: &ResidualQuantizer, r: &EncodeResult) -> bool {
    let cache = r.cache.as_ref().unwrap();
    for t in 0..cache.frames() {
        for k in 0..cache.stages() {
            for (j, &z) in cache.z_pre(t, k).iter().enumerate() {
                let l = q.levels.levels()[j] as f64;
                let pos = (z + 1.0) * 0.5 * (l - 1.0);
                let frac = pos - pos.floor();
                if (frac - 0.5).abs() < 1e-3 || (z.abs() - 1.0).abs() < 1e-3 {
                    return true;
                }
            }
        }
    }
    false
}

fn random_case(seed: u64) -> Case {
    let mut rng = Rng::new(seed);
    loop {
        let blocks = 1 + rng.below(2) as usize;
        let layout: Vec<(usize, usize)> = (0..blocks)
            .map(|_| (1 + rng.below(3) as usize, 1 + rng.below(2) as usize))
            .collect();
        let f: usize = layout.iter().map(|b| b.1).sum();
        let d: usize = layout.iter().map(|b| b.0).sum();
        let levels: Vec<u32> = (0..f).map(|_| 2 + rng.below(4) as u32).collect();
        let stages = 1 + rng.below(3) as usize;
        let mut q = ResidualQuantizer::init(&layout, LevelSpec::new(levels, 0).unwrap(), 0.1, stages, &mut rng).unwrap();
        for s in &mut q.stages {
            for v in s.ell.iter_mut().chain(s.bias.iter_mut()) {
                *v = 0.4 * rng.normal();
            }
        }
        let frames = 1 + rng.below(3) as usize;
        let u = FeatureMatrix::new(frames, d, (0..frames * d).map(|_| 0.8 * rng.normal()).collect()).unwrap();
        let upstream = FeatureMatrix::new(frames, d, (0..frames * d).map(|_| rng.normal()).collect()).unwrap();
        let active = 1 + rng.below(stages as u64) as usize;
        let r = q.quantize_latent(&u, &EncodeOptions::stages(active).with_cache()).unwrap();
        if !near_boundary(&q, &r) {
            return Case { q, u, upstream, active };
        }
    }
}

fn dense_jacobian(q: &ResidualQuantizer, active: usize) -> Matrix {
    let d = q.latent_dim();
    let mut total = Matrix::zeros(d, d);
    let mut carry = Matrix::identity(d);
    for s in &q.stages[..active] {
        let a = s.output.to_dense().matmul(&s.input.to_dense()).unwrap();
        let term = a.matmul(&carry).unwrap();
        for (t, v) in total.as_mut_slice().iter_mut().zip(term.as_slice()) {
            *t += v;
        }
        let mut i_minus_a = Matrix::identity(d);
        for (x, v) in i_minus_a.as_mut_slice().iter_mut().zip(a.as_slice()) {
            *x -= v;
        }
        carry = i_minus_a.matmul(&carry).unwrap();
    }
    total
}

/// Forward pass where every quantization offset q - z̃ is frozen at `offsets`
/// (per frame, stage, dim). Returns Û and the commitment term against the
/// frozen quantized values `frozen_q`.
fn surrogate(q: &ResidualQuantizer, u: &FeatureMatrix, active: usize, offsets: &[f64], frozen_q: &[f64]) -> (Vec<f64>, f64) {
    let d = q.latent_dim();
    let f = q.fsq_dim();
    let mut out = vec![0.0; u.frames() * d];
    let mut commit = 0.0;
    for t in 0..u.frames() {
        let mut r = u.frame(t).to_vec();
        for k in 0..active {
            let s = &q.stages[k];
            let z = s.input.apply(&r);
            let mut zhat = vec![0.0; f];
            for j in 0..f {
                let scale = softplus(s.ell[j]) + q.epsilon;
                let zt = scale * (z[j] - s.bias[j]);
                let idx = (t * active + k) * f + j;
                zhat[j] = (zt + offsets[idx]) / scale + s.bias[j];
                commit += (frozen_q[idx] - zt).powi(2);
            }
            let uh = s.output.apply(&zhat);
            for i in 0..d {
                out[t * d + i] += uh[i];
                r[i] -= uh[i];
            }
        }
    }
    (out, commit / (u.frames() * active * f) as f64)
}

fn offsets(r: &EncodeResult, f: usize) -> (Vec<f64>, Vec<f64>) {
    let cache = r.cache.as_ref().unwrap();
    let (mut off, mut qv) = (Vec::new(), Vec::new());
    for t in 0..cache.frames() {
        for k in 0..cache.stages() {
            for j in 0..f {
                off.push(cache.z_post(t, k)[j] - cache.z_pre(t, k)[j]);
                qv.push(cache.z_post(t, k)[j]);
            }
        }
    }
    (off, qv)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

/// Backward latent gradient against the closed-form Jacobian, relative 1e-6.
pub fn jacobian_check(seed: u64) -> Result<(), String> {
    let c = random_case(seed);
    let r = c.q.quantize_latent(&c.u, &EncodeOptions::stages(c.active).with_cache()).map_err(|e| e.to_string())?;
    let g = c.q.backward(&r, &c.upstream, 0.0).map_err(|e| e.to_string())?;
    let j = dense_jacobian(&c.q, c.active);
    for t in 0..c.u.frames() {
        let mut want = vec![0.0; c.q.latent_dim()];
        j.mul_transpose_vec_add(c.upstream.frame(t), &mut want);
        for (a, b) in g.latent.frame(t).iter().zip(&want) {
            if !close(*a, *b, 1e-6) {
                return Err(format!("seed {seed}: {a} vs {b}"));
            }
        }
    }
    Ok(())
}

/// Parameter and input gradients against central differences, relative 1e-4.
pub fn surrogate_check(seed: u64) -> Result<(), String> {
    const H: f64 = 1e-6;
    const ALPHA: f64 = 0.25;
    let c = random_case(seed);
    let f = c.q.fsq_dim();
    let r = c.q.quantize_latent(&c.u, &EncodeOptions::stages(c.active).with_cache()).map_err(|e| e.to_string())?;
    let (off, qv) = offsets(&r, f);
    let g = c.q.backward(&r, &c.upstream, ALPHA).map_err(|e| e.to_string())?;
    let loss = |q: &ResidualQuantizer, u: &FeatureMatrix| {
        let (uh, commit) = surrogate(q, u, c.active, &off, &qv);
        uh.iter().zip(c.upstream.as_slice()).map(|(a, b)| a * b).sum::<f64>() + ALPHA * commit
    };

    // The surrogate at the base point must reproduce the real forward pass.
    let (uh, commit) = surrogate(&c.q, &c.u, c.active, &off, &qv);
    if uh.iter().zip(r.quantized.as_slice()).any(|(a, b)| !close(*a, *b, 1e-12)) || !close(commit, r.commitment, 1e-12) {
        return Err(format!("seed {seed}: surrogate does not match forward pass"));
    }

    let theta = c.q.parameter_vector();
    let analytic = flatten_stage_grads(&g.stages);
    let mut probe = c.q.clone();
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += H;
        probe.set_parameter_vector(&plus).map_err(|e| e.to_string())?;
        let lp = loss(&probe, &c.u);
        let mut minus = theta.clone();
        minus[i] -= H;
        probe.set_parameter_vector(&minus).map_err(|e| e.to_string())?;
        let lm = loss(&probe, &c.u);
        let fd = (lp - lm) / (2.0 * H);
        if !close(fd, analytic[i], 1e-4) {
            return Err(format!("seed {seed} param {i}: fd {fd} vs {}", analytic[i]));
        }
    }

    for i in 0..c.u.as_slice().len() {
        let mut data = c.u.as_slice().to_vec();
        data[i] += H;
        let lp = loss(&c.q, &FeatureMatrix::new(c.u.frames(), c.u.dim(), data.clone()).unwrap());
        data[i] -= 2.0 * H;
        let lm = loss(&c.q, &FeatureMatrix::new(c.u.frames(), c.u.dim(), data).unwrap());
        let fd = (lp - lm) / (2.0 * H);
        let a = g.latent.as_slice()[i];
        if !close(fd, a, 1e-4) {
            return Err(format!("seed {seed} latent {i}: fd {fd} vs {a}"));
        }
    }
    Ok(())
}
