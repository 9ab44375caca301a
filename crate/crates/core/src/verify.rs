//! Finite-difference verification of every loss gradient and of the full
//! network composite.
//!
//! All checks run at 64-bit with central differences. Inputs are drawn from
//! seeded RNGs and screened away from the non-smooth spots (ReLU kinks,
//! hinge and mining thresholds) before checking; the screening criteria are
//! value margins, never the check outcome itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{grad_check, Tape, TensorId};
use crate::loss::{
    alternate_loss, combined_loss, mine_pairs, multi_similarity_loss, rotation_loss, LossHyper,
    LossKind, MinedPairs,
};
use crate::model::{
    backbone_forward, embed, init_params, rotation_logits, BackboneKind, BackboneSpec, LayerIds,
    ModelParams, ParamIds,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Acceptance threshold on the max relative error.
pub const GRAD_TOL: f64 = 1e-4;
/// Central-difference step.
pub const GRAD_STEP: f64 = 1e-5;

/// Required distance from any hinge or kink before a check is attempted.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }
}

/// Runs every gradient check; deterministic in the seed.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_ms_loss(seed)?,
        check_rotation_loss(seed)?,
        check_combined_loss(seed)?,
        check_alternate(LossKind::Contrastive, seed)?,
        check_alternate(LossKind::Triplet, seed)?,
        check_alternate(LossKind::Lifted, seed)?,
        check_network_composite(seed)?,
    ])
}

fn random_similarities(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::new(vec![n, n], data).expect("square")
}

/// A 6-point batch with two points per pseudo-class, so every anchor mines
/// both positives and negatives.
fn six_point_instance(seed: u64) -> (Tensor<f64>, Vec<usize>, MinedPairs, LossHyper<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hyper = LossHyper::<f64>::defaults();
    let labels = vec![0, 0, 1, 1, 2, 2];
    let s = random_similarities(&mut rng, 6);
    let pairs = mine_pairs(&s, &labels, hyper.epsilon).expect("mining");
    (s, labels, pairs, hyper)
}

fn check_ms_loss(seed: u64) -> Result<CheckReport> {
    let (s, _, pairs, hyper) = six_point_instance(seed);
    let build = |tape: &mut Tape<f64>, x: TensorId| -> Result<TensorId> {
        multi_similarity_loss(tape, x, &pairs, &hyper, false)
    };
    let err = grad_check(&build, &s, GRAD_STEP)?;
    Ok(CheckReport {
        name: "multi_similarity_loss",
        max_rel_err: err,
    })
}

fn random_logits(rng: &mut ChaCha8Rng, rows: usize) -> (Tensor<f64>, Vec<usize>) {
    let data: Vec<f64> = (0..rows * 4).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
    let z: Vec<usize> = (0..rows).map(|i| i % 4).collect();
    (Tensor::new(vec![rows, 4], data).expect("logits"), z)
}

fn check_rotation_loss(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517c);
    let (logits, z) = random_logits(&mut rng, 8);
    let build =
        |tape: &mut Tape<f64>, x: TensorId| -> Result<TensorId> { rotation_loss(tape, x, &z) };
    let err = grad_check(&build, &logits, GRAD_STEP)?;
    Ok(CheckReport {
        name: "rotation_loss",
        max_rel_err: err,
    })
}

/// Joint objective as a function of both inputs at once: the checked tensor
/// concatenates a similarity matrix and a logit block.
fn check_combined_loss(seed: u64) -> Result<CheckReport> {
    let (s, _, pairs, hyper) = six_point_instance(seed ^ 0xc0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1);
    let (logits, z) = random_logits(&mut rng, 8);
    let s_len = s.numel();
    let l_len = logits.numel();
    let mut flat = s.data().to_vec();
    flat.extend_from_slice(logits.data());
    let x = Tensor::new(vec![s_len + l_len], flat)?;
    let eta = 0.5;
    let build = |tape: &mut Tape<f64>, x: TensorId| -> Result<TensorId> {
        let s_part = tape.slice_flat(x, 0, s_len)?;
        let s_mat = tape.reshape(s_part, vec![6, 6])?;
        let l_part = tape.slice_flat(x, s_len, l_len)?;
        let logit_mat = tape.reshape(l_part, vec![8, 4])?;
        let l_ms = multi_similarity_loss(tape, s_mat, &pairs, &hyper, false)?;
        let l_rot = rotation_loss(tape, logit_mat, &z)?;
        combined_loss(tape, l_ms, l_rot, eta)
    };
    let err = grad_check(&build, &x, GRAD_STEP)?;
    Ok(CheckReport {
        name: "combined_loss",
        max_rel_err: err,
    })
}

/// True when every hinge term of `kind` sits at least [`KINK_MARGIN`] from
/// zero, so central differences stay on one side.
fn hinge_margins_ok(kind: LossKind, s: &Tensor<f64>, pairs: &MinedPairs, margin: f64) -> bool {
    let n = s.shape()[0];
    let sv = s.data();
    for i in 0..pairs.positives.len() {
        let row = &sv[i * n..(i + 1) * n];
        match kind {
            LossKind::Contrastive => {
                for &l in &pairs.negatives[i] {
                    if (row[l] - margin).abs() < KINK_MARGIN {
                        return false;
                    }
                }
            }
            LossKind::Triplet => {
                for &p in &pairs.positives[i] {
                    for &ng in &pairs.negatives[i] {
                        if (row[ng] - row[p] + margin).abs() < KINK_MARGIN {
                            return false;
                        }
                    }
                }
            }
            LossKind::Lifted => {
                if pairs.negatives[i].is_empty() {
                    continue;
                }
                let mut esum = 0.0f64;
                for &ng in &pairs.negatives[i] {
                    esum += (margin - 1.0 + row[ng]).exp();
                }
                let lse = esum.ln();
                for &p in &pairs.positives[i] {
                    if (lse + 1.0 - row[p]).abs() < KINK_MARGIN {
                        return false;
                    }
                }
            }
            LossKind::MultiSimilarity => {}
        }
    }
    true
}

fn check_alternate(kind: LossKind, seed: u64) -> Result<CheckReport> {
    let hyper = LossHyper::<f64>::defaults();
    let labels = vec![0, 0, 1, 1, 2, 2];
    // deterministic screening: advance the sub-seed until margins are clear
    for attempt in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xa17e + attempt * 7919));
        let s = random_similarities(&mut rng, 6);
        let pairs = mine_pairs(&s, &labels, hyper.epsilon)?;
        if !hinge_margins_ok(kind, &s, &pairs, hyper.margin) {
            continue;
        }
        let build = |tape: &mut Tape<f64>, x: TensorId| -> Result<TensorId> {
            alternate_loss(tape, kind, x, &pairs, hyper.margin)
        };
        let err = grad_check(&build, &s, GRAD_STEP)?;
        return Ok(CheckReport {
            name: match kind {
                LossKind::Contrastive => "contrastive_loss",
                LossKind::Triplet => "triplet_loss",
                LossKind::Lifted => "lifted_loss",
                LossKind::MultiSimilarity => unreachable!(),
            },
            max_rel_err: err,
        });
    }
    Err(Error::Numeric(format!(
        "no kink-free instance found for {kind:?} in 64 attempts"
    )))
}

struct CompositeSetup {
    model: ModelParams<f64>,
    metric_images: Tensor<f64>,
    rot_images: Tensor<f64>,
    z: Vec<usize>,
    labels: Vec<usize>,
}

fn composite_setup(attempt_seed: u64) -> CompositeSetup {
    let spec = BackboneSpec::new(BackboneKind::SmallConv, vec![3, 4], (1, 8, 8)).unwrap();
    let model = init_params::<f64>(&spec, 4, attempt_seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed ^ 0xfeed);
    let imgs = |n: usize, rng: &mut ChaCha8Rng| -> Tensor<f64> {
        let data: Vec<f64> = (0..n * 64).map(|_| rng.random::<f64>()).collect();
        Tensor::new(vec![n, 1, 8, 8], data).unwrap()
    };
    let metric_images = imgs(6, &mut rng);
    let rot_unique = imgs(2, &mut rng);
    let (rot_images, z) =
        crate::data::build_rotation_batch(&rot_unique, &[0, 1]).expect("rotation batch");
    CompositeSetup {
        model,
        metric_images,
        rot_images,
        z,
        labels: vec![0, 0, 1, 1, 2, 2],
    }
}

/// Smallest |pre-activation| across the conv stack for one batch.
fn min_relu_margin(model: &ModelParams<f64>, images: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let ids = model.insert_into(&mut tape, false);
    let mut cur = tape.constant(images.clone());
    let mut worst = f64::INFINITY;
    for lids in &ids.backbone {
        let LayerIds::Conv { kernel } = lids else { unreachable!("conv spec") };
        let conv = tape.conv2d(cur, *kernel, 2, 1).expect("conv");
        for &v in tape.value(conv).data() {
            worst = worst.min(v.abs());
        }
        cur = tape.relu(conv);
    }
    worst
}

fn check_network_composite(seed: u64) -> Result<CheckReport> {
    let hyper = LossHyper::<f64>::defaults();
    for attempt in 0..64u64 {
        let setup = composite_setup(seed ^ (0xbeef + attempt * 104729));
        let margin = min_relu_margin(&setup.model, &setup.metric_images)
            .min(min_relu_margin(&setup.model, &setup.rot_images));
        if margin < KINK_MARGIN * GRAD_STEP * 100.0 {
            continue;
        }

        // pairs frozen from the unperturbed parameters, as in a training step
        let base_emb = setup.model.embeddings(&setup.metric_images)?;
        let mut probe = Tape::new();
        let e = probe.constant(base_emb);
        let s = probe.row_gram(e)?;
        let pairs = mine_pairs(probe.value(s), &setup.labels, hyper.epsilon)?;

        let named = setup.model.named_tensors();
        let shapes: Vec<Vec<usize>> = named.iter().map(|(_, t)| t.shape().to_vec()).collect();
        let flat: Vec<f64> = named
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect();
        let x0 = Tensor::new(vec![flat.len()], flat)?;
        let spec = setup.model.spec.clone();
        let n_backbone = setup.model.backbone.len();

        let build = |tape: &mut Tape<f64>, x: TensorId| -> Result<TensorId> {
            let mut offset = 0usize;
            let mut unpack = |tape: &mut Tape<f64>, shape: &Vec<usize>| -> Result<TensorId> {
                let len: usize = shape.iter().product();
                let sl = tape.slice_flat(x, offset, len)?;
                offset += len;
                tape.reshape(sl, shape.clone())
            };
            let mut backbone = Vec::new();
            for shape in shapes.iter().take(n_backbone) {
                backbone.push(LayerIds::Conv {
                    kernel: unpack(tape, shape)?,
                });
            }
            let ids = ParamIds {
                backbone,
                embed_w: unpack(tape, &shapes[n_backbone])?,
                embed_b: unpack(tape, &shapes[n_backbone + 1])?,
                rot_w: unpack(tape, &shapes[n_backbone + 2])?,
                rot_b: unpack(tape, &shapes[n_backbone + 3])?,
            };
            let xm = tape.constant(setup.metric_images.clone());
            let feats = backbone_forward(tape, &spec, &ids, xm)?;
            let emb_id = embed(tape, &ids, feats)?;
            let s_mat = tape.row_gram(emb_id)?;
            let l_ms = multi_similarity_loss(tape, s_mat, &pairs, &hyper, false)?;
            let xr = tape.constant(setup.rot_images.clone());
            let feats_r = backbone_forward(tape, &spec, &ids, xr)?;
            let logits = rotation_logits(tape, &ids, feats_r)?;
            let l_rot = rotation_loss(tape, logits, &setup.z)?;
            combined_loss(tape, l_ms, l_rot, 0.5)
        };
        let err = grad_check(&build, &x0, GRAD_STEP)?;
        return Ok(CheckReport {
            name: "network_composite",
            max_rel_err: err,
        });
    }
    Err(Error::Numeric(
        "no kink-free composite instance found in 64 attempts".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes_at_tolerance() {
        let reports = run_gradient_suite(20240207).unwrap();
        assert_eq!(reports.len(), 7);
        for r in &reports {
            assert!(
                r.passed(),
                "{} failed: max relative error {}",
                r.name,
                r.max_rel_err
            );
        }
    }
}
