//! Runtime gradient-verification suite: finite-difference checks for every
//! tape op plus end-to-end checks of both assembled models, all in f64.
//! Backs the `gradcheck` CLI subcommand and the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::{bce_with_logits_mean, dice_loss_mean};
use crate::model::{HeadKind, IqaModel, ModelConfig, Strategy};
use crate::params::ParamStore;
use crate::tensor::gradcheck::{gradcheck_with, GradCheckReport, DEFAULT_STEP};
use crate::tensor::{Graph, Result as TensorResult, TensorId};
use crate::vit::EncoderConfig;

pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn push(&mut self, name: &str, report: &GradCheckReport) {
        self.checks.push(CheckOutcome {
            name: name.to_owned(),
            max_rel_err: report.worst(),
            tolerance: report.tolerance,
            pass: report.passed(),
        });
    }
}

fn sample(rng: &mut ChaCha8Rng, n: usize, avoid_kink: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mut v: f64 = rng.random_range(-1.0..1.0);
            if avoid_kink && v.abs() < 0.05 {
                v = if v >= 0.0 { v + 0.1 } else { v - 0.1 };
            }
            v
        })
        .collect()
}

fn check_one<F>(
    out: &mut VerifyReport,
    corrupt: Option<&str>,
    name: &str,
    shapes: &[&[usize]],
    avoid_kink: bool,
    tolerance: f64,
    build: F,
) where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[crate::params::ParamId]) -> TensorResult<TensorId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED ^ name.len() as u64);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let n: usize = s.iter().product();
            store.add(&format!("{name}.p{i}"), sample(&mut rng, n, avoid_kink), s.to_vec(), true)
        })
        .collect();
    let report = gradcheck_with(
        &mut store,
        |g, s| build(g, s, &ids),
        tolerance,
        DEFAULT_STEP,
        corrupt,
    )
    .expect("gradcheck construction");
    out.push(name, &report);
}

/// Finite-difference check of every forward op's backward rule.
pub fn run_op_suite(corrupt: Option<&str>) -> VerifyReport {
    let mut out = VerifyReport::default();
    let c = corrupt;

    check_one(&mut out, c, "matmul", &[&[3, 4], &[4, 2]], false, OP_TOLERANCE, |g, s, p| {
        let a = g.param(s, p[0]);
        let b = g.param(s, p[1]);
        let y = g.matmul(a, b)?;
        g.sum_all(y)
    });
    check_one(&mut out, c, "add", &[&[2, 5], &[2, 5]], false, OP_TOLERANCE, |g, s, p| {
        let a = g.param(s, p[0]);
        let b = g.param(s, p[1]);
        let y = g.add(a, b)?;
        let sq = g.mul(y, y)?;
        g.sum_all(sq)
    });
    check_one(&mut out, c, "subtract", &[&[2, 5], &[2, 5]], false, OP_TOLERANCE, |g, s, p| {
        let a = g.param(s, p[0]);
        let b = g.param(s, p[1]);
        let y = g.sub(a, b)?;
        let sq = g.mul(y, y)?;
        g.sum_all(sq)
    });
    check_one(&mut out, c, "mul", &[&[2, 5], &[2, 5]], false, OP_TOLERANCE, |g, s, p| {
        let a = g.param(s, p[0]);
        let b = g.param(s, p[1]);
        let y = g.mul(a, b)?;
        g.mean_all(y)
    });
    check_one(&mut out, c, "div", &[&[2, 5], &[2, 5]], false, OP_TOLERANCE, |g, s, p| {
        let a = g.param(s, p[0]);
        let b = g.param(s, p[1]);
        let shifted = g.affine(b, 1.0, 3.0)?;
        let y = g.div(a, shifted)?;
        g.mean_all(y)
    });
    check_one(&mut out, c, "broadcast-add", &[&[4, 3, 5], &[5]], false, OP_TOLERANCE, |g, s, p| {
        let a = g.param(s, p[0]);
        let b = g.param(s, p[1]);
        let y = g.add_broadcast(a, b)?;
        let sq = g.mul(y, y)?;
        g.sum_all(sq)
    });
    check_one(&mut out, c, "scale", &[&[7]], false, OP_TOLERANCE, |g, s, p| {
        let x = g.param(s, p[0]);
        let y = g.affine(x, -1.7, 0.4)?;
        let sq = g.mul(y, y)?;
        g.sum_all(sq)
    });
    check_one(&mut out, c, "relu", &[&[2, 7]], true, OP_TOLERANCE, |g, s, p| {
        let x = g.param(s, p[0]);
        let y = g.relu(x)?;
        let sq = g.mul(y, y)?;
        g.sum_all(sq)
    });
    check_one(&mut out, c, "gelu", &[&[2, 7]], false, OP_TOLERANCE, |g, s, p| {
        let x = g.param(s, p[0]);
        let y = g.gelu(x)?;
        let sq = g.mul(y, y)?;
        g.sum_all(sq)
    });
    check_one(&mut out, c, "sigmoid", &[&[2, 7]], false, OP_TOLERANCE, |g, s, p| {
        let x = g.param(s, p[0]);
        let y = g.sigmoid(x)?;
        let sq = g.mul(y, y)?;
        g.sum_all(sq)
    });
    check_one(&mut out, c, "softplus", &[&[2, 7]], false, OP_TOLERANCE, |g, s, p| {
        let x = g.param(s, p[0]);
        let y = g.softplus(x)?;
        let sq = g.mul(y, y)?;
        g.sum_all(sq)
    });
    check_one(&mut out, c, "transpose", &[&[3, 4]], false, OP_TOLERANCE, |g, s, p| {
        let x = g.param(s, p[0]);
        let t = g.transpose(x)?;
        let sq = g.mul(t, t)?;
        g.sum_all(sq)
    });
    check_one(&mut out, c, "transpose-batched", &[&[2, 3, 4]], false, OP_TOLERANCE, |g, s, p| {
        let x = g.param(s, p[0]);
        let t = g.transpose_batched(x)?;
        let sq = g.mul(t, t)?;
        g.sum_all(sq)
    });
    check_one(&mut out, c, "reshape", &[&[3, 4]], false, OP_TOLERANCE, |g, s, p| {
        let x = g.param(s, p[0]);
        let r = g.reshape(x, vec![2, 6])?;
        let sq = g.mul(r, r)?;
        g.sum_all(sq)
    });
    check_one(&mut out, c, "concat", &[&[2, 3], &[2, 2]], false, OP_TOLERANCE, |g, s, p| {
        let a = g.param(s, p[0]);
        let b = g.param(s, p[1]);
        let y = g.concat(&[a, b], 1)?;
        let sq = g.mul(y, y)?;
        g.sum_all(sq)
    });
    check_one(&mut out, c, "slice", &[&[3, 6]], false, OP_TOLERANCE, |g, s, p| {
        let x = g.param(s, p[0]);
        let y = g.slice(x, 1, 2, 3)?;
        let sq = g.mul(y, y)?;
        g.sum_all(sq)
    });
    check_one(&mut out, c, "embedding-lookup", &[&[5, 3]], false, OP_TOLERANCE, |g, s, p| {
        let t = g.param(s, p[0]);
        let y = g.embedding_lookup(t, &[1, 4, 1, 0])?;
        let sq = g.mul(y, y)?;
        g.sum_all(sq)
    });
    check_one(
        &mut out,
        c,
        "attention",
        &[&[6, 4], &[6, 4], &[6, 4]],
        false,
        OP_TOLERANCE,
        |g, s, p| {
            let q = g.param(s, p[0]);
            let k = g.param(s, p[1]);
            let v = g.param(s, p[2]);
            let o = g.attention(q, k, v, 2, 2)?;
            let sq = g.mul(o, o)?;
            g.sum_all(sq)
        },
    );
    check_one(&mut out, c, "softmax", &[&[3, 5]], false, OP_TOLERANCE, |g, s, p| {
        let x = g.param(s, p[0]);
        let y = g.softmax(x)?;
        let sq = g.mul(y, y)?;
        g.sum_all(sq)
    });
    check_one(
        &mut out,
        c,
        "layer-normalization",
        &[&[4, 6], &[6], &[6]],
        false,
        OP_TOLERANCE,
        |g, s, p| {
            let x = g.param(s, p[0]);
            let gamma = g.param(s, p[1]);
            let beta = g.param(s, p[2]);
            let y = g.layer_norm(x, gamma, beta, 1e-5)?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        },
    );
    check_one(
        &mut out,
        c,
        "conv2d",
        &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]],
        false,
        OP_TOLERANCE,
        |g, s, p| {
            let x = g.param(s, p[0]);
            let w = g.param(s, p[1]);
            let b = g.param(s, p[2]);
            let y = g.conv2d(x, w, Some(b), 1, 1)?;
            let sq = g.mul(y, y)?;
            g.sum_all(sq)
        },
    );
    check_one(&mut out, c, "nearest-upsample2x", &[&[1, 2, 3, 3]], false, OP_TOLERANCE, |g, s, p| {
        let x = g.param(s, p[0]);
        let y = g.upsample2x(x)?;
        let sq = g.mul(y, y)?;
        g.sum_all(sq)
    });
    check_one(&mut out, c, "sum-reduce", &[&[3, 4]], false, OP_TOLERANCE, |g, s, p| {
        let x = g.param(s, p[0]);
        let sq = g.mul(x, x)?;
        g.sum_all(sq)
    });
    check_one(&mut out, c, "mean-reduce", &[&[3, 4]], false, OP_TOLERANCE, |g, s, p| {
        let x = g.param(s, p[0]);
        let sq = g.mul(x, x)?;
        g.mean_all(sq)
    });
    check_one(&mut out, c, "bce-with-logits", &[&[6]], false, OP_TOLERANCE, |g, s, p| {
        let x = g.param(s, p[0]);
        bce_with_logits_mean(g, x, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
    });
    check_one(&mut out, c, "dice-loss", &[&[2, 3, 3]], false, OP_TOLERANCE, |g, s, p| {
        let x = g.param(s, p[0]);
        let gt: Vec<Vec<f64>> = vec![
            (0..9).map(|i| f64::from(i % 2 == 0)).collect(),
            (0..9).map(|i| f64::from(i % 3 == 0)).collect(),
        ];
        dice_loss_mean(g, x, &gt)
    });
    out
}

fn micro_model(head: HeadKind, store: &mut ParamStore<f64>) -> IqaModel {
    let mut cfg = ModelConfig::new(EncoderConfig::micro(), head, Strategy::Lora);
    cfg.lora.as_mut().unwrap().rank = 2;
    cfg.init_seed = 77;
    let model = IqaModel::build(cfg, store).expect("micro model");
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_owned();
        if name.ends_with(".B") || name.starts_with("head.") || name.starts_with("decoder.") {
            for v in store.data_mut(id).iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    model
}

/// End-to-end checks: encoder + adapters + each head, through its loss.
pub fn run_model_suite(corrupt: Option<&str>) -> VerifyReport {
    let mut out = VerifyReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    {
        let mut store = ParamStore::new();
        let model = micro_model(HeadKind::Classification, &mut store);
        let size = model.cfg.encoder.image_size;
        let px: Vec<f64> = (0..2 * size * size).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels = [1.0, 0.0];
        let report = gradcheck_with(
            &mut store,
            |g, s| {
                let img = g.constant(px.clone(), vec![2, 1, size, size])?;
                let logits = match model.forward_logits(g, s, img) {
                    Ok(t) => t,
                    Err(crate::model::ModelError::Tensor(t)) => return Err(t),
                    Err(e) => panic!("model build error during gradcheck: {e}"),
                };
                bce_with_logits_mean(g, logits, &labels)
            },
            MODEL_TOLERANCE,
            DEFAULT_STEP,
            corrupt,
        )
        .expect("classifier gradcheck");
        out.push("vit+lora+classifier (bce)", &report);
    }

    {
        let mut store = ParamStore::new();
        let model = micro_model(HeadKind::Segmentation, &mut store);
        let size = model.cfg.encoder.image_size;
        let px: Vec<f64> = (0..2 * size * size).map(|_| rng.random_range(0.0..1.0)).collect();
        let gt: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..size * size).map(|_| f64::from(rng.random_range(0..2))).collect())
            .collect();
        let report = gradcheck_with(
            &mut store,
            |g, s| {
                let img = g.constant(px.clone(), vec![2, 1, size, size])?;
                let logits = match model.forward_mask_logits(g, s, img) {
                    Ok(t) => t,
                    Err(crate::model::ModelError::Tensor(t)) => return Err(t),
                    Err(e) => panic!("model build error during gradcheck: {e}"),
                };
                dice_loss_mean(g, logits, &gt)
            },
            MODEL_TOLERANCE,
            DEFAULT_STEP,
            corrupt,
        )
        .expect("segmentation gradcheck");
        out.push("vit+lora+seg-decoder (dice)", &report);
    }
    out
}

/// Ops plus end-to-end models; the full `gradcheck` command payload.
pub fn run_all(corrupt: Option<&str>) -> VerifyReport {
    let mut report = run_op_suite(corrupt);
    let models = run_model_suite(corrupt);
    report.checks.extend(models.checks);
    report
}
