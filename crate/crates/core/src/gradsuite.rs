//! Central finite-difference checks for every differentiable tape op, the
//! retrieval loss (hidden-state adapter, fusion weight, encoder) and the
//! entity adapter through a frozen LM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::generator::{entity_batch_loss, EntityAdapter};
use crate::models::encoder::Item;
use crate::models::{DualEncoder, ToyLm, ToyLmConfig};
use crate::retriever::{retrieval_batch_loss, Fusion, RetrieverParams};
use crate::tensor::{finite_difference_check, GradCheckReport, Module, Param, Segment, Tape, Tensor, Var};
use crate::types::{EntityDocument, MultimodalQuery};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE && self.report.checked > 0
    }
}

/// Like [`finite_difference_check`] but perturbs the trainable parameters of
/// `module` in place. Frozen parameters are skipped.
pub fn param_gradient_check<M, F>(module: &mut M, step: f64, f: F) -> Result<GradCheckReport>
where
    M: Module,
    F: for<'a> Fn(&'a M, &mut Tape<'a>) -> Result<Var>,
{
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut tape = Tape::new();
        let out = f(module, &mut tape)?;
        let grads = tape.backward(out)?;
        module
            .params()
            .iter()
            .map(|p| {
                p.requires_grad().then(|| {
                    grads
                        .param(p.id())
                        .map_or_else(|| vec![0.0; p.value().numel()], <[f64]>::to_vec)
                })
            })
            .collect()
    };
    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(m, &mut tape)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    for (k, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for (i, &a) in grad.iter().enumerate() {
            let orig = module.params()[k].value().data()[i];
            module.params_mut()[k].value_mut().data_mut()[i] = orig + step;
            let plus = eval(module)?;
            module.params_mut()[k].value_mut().data_mut()[i] = orig - step;
            let minus = eval(module)?;
            module.params_mut()[k].value_mut().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces any tensor to a scalar with fixed random weights so that every
/// output element contributes a distinct gradient.
fn probe(tape: &mut Tape<'_>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = tape.leaf(Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(97);
    let positive = |shape: &[usize], rng: &mut ChaCha8Rng| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap()
    };
    vec![
        ("matmul", vec![randn(&[3, 4], &mut rng), randn(&[4, 2], &mut rng)], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, 1)
        })),
        ("transpose", vec![randn(&[3, 4], &mut rng)], Box::new(|t, v| {
            let y = t.transpose(v[0])?;
            probe(t, y, 2)
        })),
        ("add", vec![randn(&[2, 3], &mut rng), randn(&[2, 3], &mut rng)], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y, 3)
        })),
        ("sub", vec![randn(&[2, 3], &mut rng), randn(&[2, 3], &mut rng)], Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            probe(t, y, 4)
        })),
        ("mul", vec![randn(&[2, 3], &mut rng), randn(&[2, 3], &mut rng)], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y, 5)
        })),
        ("add_bias", vec![randn(&[3, 4], &mut rng), randn(&[4], &mut rng)], Box::new(|t, v| {
            let y = t.add_bias(v[0], v[1])?;
            probe(t, y, 6)
        })),
        ("affine", vec![randn(&[2, 3], &mut rng)], Box::new(|t, v| {
            let y = t.affine(v[0], -1.7, 0.3);
            probe(t, y, 7)
        })),
        ("scale", vec![randn(&[2, 3], &mut rng)], Box::new(|t, v| {
            let y = t.scale(v[0], 2.5);
            probe(t, y, 8)
        })),
        ("mul_scalar", vec![randn(&[2, 3], &mut rng), randn(&[1], &mut rng)], Box::new(|t, v| {
            let y = t.mul_scalar(v[0], v[1])?;
            probe(t, y, 9)
        })),
        ("exp", vec![randn(&[2, 3], &mut rng)], Box::new(|t, v| {
            let y = t.exp(v[0]);
            probe(t, y, 10)
        })),
        ("sigmoid", vec![randn(&[2, 3], &mut rng)], Box::new(|t, v| {
            let y = t.sigmoid(v[0]);
            probe(t, y, 11)
        })),
        ("gelu", vec![randn(&[3, 4], &mut rng)], Box::new(|t, v| {
            let y = t.gelu(v[0]);
            probe(t, y, 12)
        })),
        (
            "layer_norm",
            vec![randn(&[3, 5], &mut rng), positive(&[5], &mut rng), randn(&[5], &mut rng)],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                probe(t, y, 13)
            }),
        ),
        ("sum", vec![randn(&[2, 3], &mut rng)], Box::new(|t, v| {
            let y = t.sum(v[0]);
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        })),
        ("mean", vec![randn(&[2, 3], &mut rng)], Box::new(|t, v| {
            let y = t.mean(v[0]);
            let y = t.exp(y);
            Ok(t.sum(y))
        })),
        ("l2_normalize_rows", vec![randn(&[3, 4], &mut rng)], Box::new(|t, v| {
            let y = t.l2_normalize_rows(v[0]);
            probe(t, y, 14)
        })),
        ("select_rows", vec![randn(&[4, 3], &mut rng)], Box::new(|t, v| {
            let y = t.select_rows(v[0], &[2, 0, 2, 3])?;
            probe(t, y, 15)
        })),
        ("concat_rows", vec![randn(&[2, 3], &mut rng), randn(&[1, 3], &mut rng)], Box::new(|t, v| {
            let y = t.concat_rows(&[v[0], v[1], v[0]])?;
            probe(t, y, 16)
        })),
        ("reshape", vec![randn(&[2, 6], &mut rng)], Box::new(|t, v| {
            let y = t.reshape(v[0], vec![3, 4])?;
            probe(t, y, 17)
        })),
        (
            "causal_attention",
            vec![randn(&[7, 4], &mut rng), randn(&[7, 4], &mut rng), randn(&[7, 4], &mut rng)],
            Box::new(|t, v| {
                let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
                let y = t.causal_attention(v[0], v[1], v[2], 2, &segs)?;
                probe(t, y, 18)
            }),
        ),
        ("cross_entropy", vec![randn(&[4, 6], &mut rng)], Box::new(|t, v| {
            t.cross_entropy(v[0], &[1, 5, 0, 1])
        })),
    ]
}

fn toy_queries(rng: &mut ChaCha8Rng, n: usize, vocab: usize, image_dim: usize) -> Vec<MultimodalQuery> {
    (0..n)
        .map(|_| MultimodalQuery {
            question: (0..4).map(|_| rng.random_range(5..vocab)).collect(),
            image: (0..image_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            instruction: vec![],
        })
        .collect()
}

fn toy_documents(rng: &mut ChaCha8Rng, n: usize, vocab: usize, image_dim: usize) -> Vec<EntityDocument> {
    (0..n)
        .map(|id| EntityDocument {
            id,
            features: (0..image_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            caption: (0..3).map(|_| rng.random_range(5..vocab)).collect(),
            comment: None,
            metadata: (0..2).map(|_| rng.random_range(5..vocab)).collect(),
        })
        .collect()
}

/// Contrastive retrieval loss with respect to every retriever parameter:
/// hidden-state adapter, fusion logit, both encoder towers, logit scale.
fn retrieval_case(step: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(98);
    let (vocab, image_dim, d_model) = (20, 8, 6);
    let enc = DualEncoder::new(vocab, image_dim, &mut rng);
    let mut params = RetrieverParams::new(d_model, enc, &mut rng);
    params.fusion_logit.value_mut().data_mut()[0] = 0.3;
    let queries = toy_queries(&mut rng, 3, vocab, image_dim);
    let docs = toy_documents(&mut rng, 3, vocab, image_dim);
    let hidden: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..d_model).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let texts: Vec<Vec<usize>> = docs.iter().map(EntityDocument::description).collect();
    param_gradient_check(&mut params, step, |p, tape| {
        let h: Vec<&[f64]> = hidden.iter().map(Vec::as_slice).collect();
        let q: Vec<&MultimodalQuery> = queries.iter().collect();
        let items: Vec<Item<'_>> = docs
            .iter()
            .zip(&texts)
            .map(|(d, t)| Item {
                text: t,
                image: &d.features,
            })
            .collect();
        retrieval_batch_loss(p, tape, &h, &q, &items, Fusion::Learned)
    })
}

fn small_lm(rng: &mut ChaCha8Rng, vocab: usize) -> ToyLm {
    let mut cfg = ToyLmConfig::new(vocab);
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.adapter_hidden = 10;
    cfg.max_seq = 32;
    let mut lm = ToyLm::new(cfg, rng);
    lm.freeze();
    lm
}

/// ξ together with the frozen LM it feeds, exposing only ξ's parameters.
struct XiOnLm {
    lm: ToyLm,
    xi: EntityAdapter,
}

impl Module for XiOnLm {
    fn params(&self) -> Vec<&Param> {
        self.xi.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.xi.params_mut()
    }
}

/// Comment cross-entropy with respect to ξ, backpropagated through the frozen
/// LM (whose own parameters receive no gradient).
fn entity_case(step: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let vocab = 20;
    let lm = small_lm(&mut rng, vocab);
    let image_dim = lm.config().image_dim();
    let mut xi = EntityAdapter::from_lm(&lm);
    // Move away from the native weights so the check is not at a special point.
    for p in xi.params_mut() {
        for v in p.value_mut().data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let queries = toy_queries(&mut rng, 2, vocab, image_dim);
    let docs = toy_documents(&mut rng, 2, vocab, image_dim);
    let targets: Vec<Vec<usize>> = (0..2)
        .map(|_| (0..3).map(|_| rng.random_range(5..vocab)).collect())
        .collect();
    let mut m = XiOnLm { lm, xi };
    param_gradient_check(&mut m, step, |m, tape| {
        let q: Vec<&MultimodalQuery> = queries.iter().collect();
        let d: Vec<&EntityDocument> = docs.iter().collect();
        let t: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
        entity_batch_loss(&m.lm, &m.xi, tape, &q, &d, &t)
    })
}

/// The whole suite, one case per op plus the two adapter cases.
pub fn run(step: f64) -> Result<Vec<GradCase>> {
    let mut cases = Vec::new();
    for (name, inputs, f) in op_cases() {
        let report = finite_difference_check(&inputs, step, |t, v| f(t, v))?;
        cases.push(GradCase {
            name: format!("op/{name}"),
            report,
        });
    }
    cases.push(GradCase {
        name: "retriever/contrastive-loss".into(),
        report: retrieval_case(step)?,
    });
    cases.push(GradCase {
        name: "entity-adapter/through-frozen-lm".into(),
        report: entity_case(step)?,
    });
    Ok(cases)
}
