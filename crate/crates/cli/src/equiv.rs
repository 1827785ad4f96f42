//! Algebraic-equivalence oracles. Each entry compares a library routine to
//! an independent evaluation written with plain loops over slices.

use mlb_core::attention::{
    classify, forward, hobm_energy, marn_forward, mrn_block, mrn_stack, AttentionModelParams, HobmFactors, ModelDims,
    MrnBlock, MrnBlockParams,
};
use mlb_core::pooling::{
    expand_full_model, full_model_pool, low_rank_pool, nonlinear_pool, Placement, PoolingParams, RankMode,
};
use mlb_core::sketch::{
    circular_convolution, compact_bilinear_pool, hashed_bilinear_oracle, outer_product_sketch, ConvMethod, SketchParams,
};
use mlb_core::{Activation, Error, Result, Rng, Tensor};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivConfig {
    /// Random instances per oracle.
    pub instances: usize,
    pub n: usize,
    pub m: usize,
    /// Joint (rank) dimension of the pooling oracles.
    pub d: usize,
    /// Pooling outputs `c`.
    pub outputs: usize,
    /// `restricted` enforces `d ≤ min(N, M)`.
    pub rank_mode: RankMode,
    /// Largest sketch dimension drawn for the sketch oracles.
    pub sketch_dim: usize,
    /// Largest FFT length swept by the convolution oracle.
    pub max_conv_len: usize,
    pub tolerance: f64,
}

impl Default for EquivConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            n: 6,
            m: 6,
            d: 4,
            outputs: 3,
            rank_mode: RankMode::Restricted,
            sketch_dim: 7,
            max_conv_len: 256,
            tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivEntry {
    pub name: String,
    pub instances: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivReport {
    pub seed: u64,
    pub entries: Vec<EquivEntry>,
    pub pass: bool,
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "oracle length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn at(t: &Tensor, r: usize, c: usize) -> f64 {
    let cols = t.shape()[1];
    t.data()[r * cols + c]
}

/// `W_i[j][k] = Σ_r U[j][r] P[r][i] V[k][r]`.
fn reconstruct(params: &PoolingParams) -> Vec<Vec<Vec<f64>>> {
    let (n, m, d, c) = params.dims();
    (0..c)
        .map(|i| {
            (0..n)
                .map(|j| {
                    (0..m)
                        .map(|k| (0..d).map(|r| at(&params.u, j, r) * at(&params.p, r, i) * at(&params.v, k, r)).sum())
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn bilinear(w: &[Vec<f64>], x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for (j, row) in w.iter().enumerate() {
        for (k, wjk) in row.iter().enumerate() {
            s += x[j] * wjk * y[k];
        }
    }
    s
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

struct Suite<'a> {
    cfg: &'a EquivConfig,
    entries: Vec<EquivEntry>,
}

impl Suite<'_> {
    fn record(&mut self, name: &str, instances: usize, dev: f64) {
        self.entries.push(EquivEntry {
            name: name.to_string(),
            instances,
            max_deviation: dev,
            tolerance: self.cfg.tolerance,
            pass: dev < self.cfg.tolerance,
        });
    }
}

fn pooling(cfg: &EquivConfig, rng: &mut Rng) -> Result<PoolingParams> {
    let mut p = PoolingParams::init(cfg.n, cfg.m, cfg.d, cfg.outputs, cfg.rank_mode, Activation::Identity, rng)?;
    p.b = rng.uniform_tensor(&[cfg.outputs], 1.0);
    Ok(p)
}

pub fn run_equiv(cfg: &EquivConfig, seed: u64) -> Result<EquivReport> {
    if cfg.instances == 0 || cfg.sketch_dim == 0 || cfg.max_conv_len == 0 {
        return Err(Error::Config("instances, sketch_dim and max_conv_len must be positive".into()));
    }
    if cfg.n == 0 || cfg.m == 0 || cfg.d == 0 || cfg.outputs == 0 {
        return Err(Error::Config("pooling dims must be positive".into()));
    }
    let master = Rng::new(seed);
    let mut suite = Suite { cfg, entries: Vec::new() };
    let k = cfg.instances;

    // low-rank pooling against the reconstructed bilinear tensor
    let mut dev = 0.0f64;
    let mut rank_dev = 0.0f64;
    for i in 0..k {
        let mut rng = master.derive_indexed("low-rank", i as u64);
        let p = pooling(cfg, &mut rng)?;
        let x = rng.uniform_tensor(&[cfg.n], 1.0);
        let y = rng.uniform_tensor(&[cfg.m], 1.0);
        let w = reconstruct(&p);
        let oracle: Vec<f64> =
            w.iter().enumerate().map(|(i, wi)| bilinear(wi, x.data(), y.data()) + p.b.data()[i]).collect();
        dev = dev.max(max_abs(low_rank_pool(&p, &x, &y)?.data(), &oracle));
        // every W_i has rank at most d: singular value d+1 vanishes
        if cfg.d < cfg.n.min(cfg.m) {
            for wi in &w {
                let mat = DMatrix::from_fn(cfg.n, cfg.m, |r, c| wi[r][c]);
                let mut sv: Vec<f64> = mat.singular_values().iter().copied().collect();
                sv.sort_by(|a, b| b.total_cmp(a));
                rank_dev = rank_dev.max(sv[cfg.d] / sv[0].max(1.0));
            }
        }
    }
    suite.record("low_rank_reconstruction", k, dev);
    suite.record("rank_bound", k, rank_dev);

    // full model with input biases against its expanded form
    let mut dev = 0.0f64;
    for i in 0..k {
        let mut rng = master.derive_indexed("full-model", i as u64);
        let p = pooling(cfg, &mut rng)?
            .with_input_biases(rng.uniform_tensor(&[cfg.d], 1.0), rng.uniform_tensor(&[cfg.d], 1.0))?;
        let x = rng.uniform_tensor(&[cfg.n], 1.0);
        let y = rng.uniform_tensor(&[cfg.m], 1.0);
        dev = dev.max(max_abs(full_model_pool(&p, &x, &y)?.data(), expand_full_model(&p)?.evaluate(&x, &y)?.data()));
    }
    suite.record("full_model_expansion", k, dev);

    // FFT against direct circular convolution for every length
    let mut dev = 0.0f64;
    let mut rng = master.derive("convolution");
    for d in 1..=cfg.max_conv_len {
        let a = rng.uniform_tensor(&[d], 1.0);
        let b = rng.uniform_tensor(&[d], 1.0);
        let fast = circular_convolution(&a, &b, ConvMethod::Fft)?;
        let slow: Vec<f64> = (0..d).map(|j| (0..d).map(|i| a.data()[i] * b.data()[(j + d - i) % d]).sum()).collect();
        dev = dev.max(max_abs(fast.data(), &slow));
    }
    suite.record("fft_convolution", cfg.max_conv_len, dev);

    // compact pooling against the outer-product sketch and the hashed form
    let (mut dev_outer, mut dev_hashed) = (0.0f64, 0.0f64);
    for i in 0..k {
        let mut rng = master.derive_indexed("sketch", i as u64);
        let nx = 1 + rng.below(5);
        let ny = 1 + rng.below(5);
        let d = 1 + rng.below(cfg.sketch_dim);
        let sp = SketchParams::sample(nx, ny, d, &mut rng)?;
        let x = rng.uniform_tensor(&[nx], 1.0);
        let y = rng.uniform_tensor(&[ny], 1.0);
        let compact = compact_bilinear_pool(&x, &y, &sp)?;
        let mut brute = vec![0.0; d];
        for a in 0..nx {
            for b in 0..ny {
                let bucket = (sp.h_x[a] - 1 + sp.h_y[b] - 1) % d;
                brute[bucket] += f64::from(sp.s_x[a]) * f64::from(sp.s_y[b]) * x.data()[a] * y.data()[b];
            }
        }
        dev_outer = dev_outer.max(max_abs(compact.data(), &brute));
        dev_outer = dev_outer.max(max_abs(outer_product_sketch(&x, &y, &sp)?.data(), &brute));
        for (bucket, value) in compact.data().iter().enumerate() {
            let w = hashed_bilinear_oracle(&sp, bucket)?;
            let mut s = 0.0;
            for a in 0..nx {
                for b in 0..ny {
                    s += x.data()[a] * at(&w, a, b) * y.data()[b];
                }
            }
            dev_hashed = dev_hashed.max((s - value).abs());
        }
    }
    suite.record("compact_vs_outer_product_sketch", k, dev_outer);
    suite.record("hashed_bilinear_form", k, dev_hashed);

    // classifier stage equals nonlinear pooling followed by a softmax
    let dims = ModelDims { n: cfg.n, m: cfg.m, d: cfg.d, glimpses: 2, lattice: 3, answers: cfg.outputs.max(2) };
    let mut dev_cls = 0.0f64;
    let mut dev_marn = 0.0f64;
    for i in 0..k {
        let mut rng = master.derive_indexed("classifier", i as u64);
        let model = AttentionModelParams::init(dims, false, 0.0, &mut rng)?;
        let q = rng.uniform_tensor(&[dims.n], 1.0);
        let vhat = rng.uniform_tensor(&[dims.glimpses * dims.m], 1.0);
        let pooled = nonlinear_pool(&model.classifier, &q, &vhat, Placement::Before)?;
        dev_cls = dev_cls.max(max_abs(classify(&model, &q, &vhat)?.data(), &softmax(pooled.data())));

        let f = rng.uniform_tensor(&[dims.cells(), dims.m], 1.0);
        let mut marn = model.clone().with_shortcut(&mut rng);
        if let Some((hq, hv)) = &mut marn.shortcut {
            *hq = Tensor::zeros(hq.shape());
            *hv = Tensor::zeros(hv.shape());
        }
        dev_marn = dev_marn.max(max_abs(marn_forward(&marn, &q, &f)?.data(), forward(&model, &q, &f)?.data()));
    }
    suite.record("classifier_is_pooling_plus_softmax", k, dev_cls);
    suite.record("marn_zero_shortcut", k, dev_marn);

    // two-block residual network against its unrolled recursion
    let mut dev = 0.0f64;
    for i in 0..k {
        let mut rng = master.derive_indexed("mrn", i as u64);
        let (nq, nv, hidden, width) = (cfg.n, cfg.m, cfg.d, cfg.d + 1);
        let mut block = |q_in: usize| MrnBlock {
            w_q: rng.glorot(width, q_in),
            w_1: rng.glorot(hidden, nv),
            w_2: rng.glorot(width, hidden),
            w_f: rng.glorot(nq, width),
        };
        let blocks = vec![block(nq), block(nq)];
        let params = MrnBlockParams { w_q_shortcut: rng.glorot(nq, nq), blocks, activation: Activation::Tanh };
        let q = rng.uniform_tensor(&[nq], 1.0);
        let v = rng.uniform_tensor(&[nv], 1.0);
        let mv = |w: &Tensor, x: &[f64]| -> Vec<f64> {
            let (r, c) = (w.shape()[0], w.shape()[1]);
            (0..r).map(|i| (0..c).map(|j| w.data()[i * c + j] * x[j]).sum()).collect()
        };
        let fblock = |b: &MrnBlock, h: &[f64]| -> Vec<f64> {
            let sq: Vec<f64> = mv(&b.w_q, h).iter().map(|z| z.tanh()).collect();
            let h1: Vec<f64> = mv(&b.w_1, v.data()).iter().map(|z| z.tanh()).collect();
            let sv: Vec<f64> = mv(&b.w_2, &h1).iter().map(|z| z.tanh()).collect();
            mv(&b.w_f, &sq.iter().zip(&sv).map(|(a, b)| a * b).collect::<Vec<_>>())
        };
        let base = mv(&params.w_q_shortcut, q.data());
        let r1 = fblock(&params.blocks[0], q.data());
        let h1: Vec<f64> = base.iter().zip(&r1).map(|(a, b)| a + b).collect();
        let r2 = fblock(&params.blocks[1], &h1);
        let h2: Vec<f64> = h1.iter().zip(&r2).map(|(a, b)| a + b).collect();
        dev = dev.max(max_abs(mrn_stack(&params, &q, &v)?.data(), &h2));
        let single = mrn_block(&params.blocks[0], Activation::Tanh, &q, &v)?;
        let sq: Vec<f64> = mv(&params.blocks[0].w_q, q.data()).iter().map(|z| z.tanh()).collect();
        let h: Vec<f64> = mv(&params.blocks[0].w_1, v.data()).iter().map(|z| z.tanh()).collect();
        let sv: Vec<f64> = mv(&params.blocks[0].w_2, &h).iter().map(|z| z.tanh()).collect();
        let prod: Vec<f64> = sq.iter().zip(&sv).map(|(a, b)| a * b).collect();
        dev = dev.max(max_abs(single.data(), &prod));
    }
    suite.record("mrn_unrolled", k, dev);

    // factored three-way energy against the reconstructed tensor
    let mut dev = 0.0f64;
    for i in 0..k {
        let mut rng = master.derive_indexed("hobm", i as u64);
        let (ni, nj, nk, nf) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        let fac = HobmFactors::new(
            rng.uniform_tensor(&[ni, nf], 1.0),
            rng.uniform_tensor(&[nj, nf], 1.0),
            rng.uniform_tensor(&[nk, nf], 1.0),
            rng.uniform_tensor(&[nk], 1.0),
            rng.uniform_tensor(&[nj], 1.0),
        )?;
        let x = rng.uniform_tensor(&[ni], 1.0);
        let y = rng.uniform_tensor(&[nj], 1.0);
        let h = rng.uniform_tensor(&[nk], 1.0);
        let mut e = 0.0;
        for a in 0..ni {
            for b in 0..nj {
                for c in 0..nk {
                    let w: f64 = (0..nf).map(|f| at(&fac.wx, a, f) * at(&fac.wy, b, f) * at(&fac.wh, c, f)).sum();
                    e += x.data()[a] * y.data()[b] * h.data()[c] * w;
                }
            }
        }
        e += (0..nk).map(|c| h.data()[c] * fac.bh.data()[c]).sum::<f64>();
        e += (0..nj).map(|b| y.data()[b] * fac.by.data()[b]).sum::<f64>();
        dev = dev.max((hobm_energy(&fac, &x, &y, &h)? - e).abs());
    }
    suite.record("hobm_factored_energy", k, dev);

    let pass = suite.entries.iter().all(|e| e.pass);
    Ok(EquivReport { seed, entries: suite.entries, pass })
}
