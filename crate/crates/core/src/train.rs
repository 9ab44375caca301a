//! The outer training loop: cluster, sample, optimize, repeat.
//!
//! Each epoch rebuilds the pseudo-label table (backbone features before the
//! first epoch, embedding vectors afterwards), then runs `floor(n / (P*M))`
//! steps. A step assembles a class-balanced P x M metric batch and an
//! independent 16-image rotation batch, runs both through the shared
//! backbone, and applies one Adam update of the joint objective.
//!
//! Training consumes only image tensors and pseudo-label tables; true labels
//! never enter this module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::cluster::{initial_features, kmeans, recluster_embeddings, KmeansOpts, PseudoLabelTable};
use crate::config::ExperimentConfig;
use crate::data::{augment, build_rotation_batch, sample_pk_batch, ROTATION_UNIQUE};
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::loss::{combined_loss, metric_loss, mine_pairs, rotation_loss, similarity_matrix};
use crate::model::{backbone_forward, embed, init_params, rotation_logits, ModelParams};
use crate::scalar::Scalar;
use crate::seeds::{derive, Stream};
use crate::tensor::Tensor;

/// First and second moment estimates per parameter, in canonical order.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = model
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamParams<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamParams<T> {
    pub fn new(lr: T) -> Self {
        AdamParams {
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
        }
    }
}

/// One bias-corrected Adam update over all parameters. Gradients arrive in
/// `named_tensors` order; a non-finite gradient fails naming the parameter.
pub fn adam_step<T: Scalar>(
    model: &mut ModelParams<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    hp: &AdamParams<T>,
) -> Result<()> {
    let named = model.named_tensors_mut();
    if grads.len() != named.len() {
        return Err(Error::Argument(format!(
            "adam_step: {} gradients for {} parameters",
            grads.len(),
            named.len()
        )));
    }
    state.t += 1;
    let bc1 = T::one() - hp.beta1.powi(state.t as i32);
    let bc2 = T::one() - hp.beta2.powi(state.t as i32);
    for (idx, (name, param)) in named.into_iter().enumerate() {
        let g = &grads[idx];
        if g.shape() != param.shape() {
            return Err(Error::Dimension(format!(
                "adam_step: gradient for {name} has shape {:?}, expected {:?}",
                g.shape(),
                param.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!(
                "adam_step: non-finite gradient for parameter {name}"
            )));
        }
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let p = param.data_mut();
        let gd = g.data();
        for j in 0..p.len() {
            m[j] = hp.beta1 * m[j] + (T::one() - hp.beta1) * gd[j];
            v[j] = hp.beta2 * v[j] + (T::one() - hp.beta2) * gd[j] * gd[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] = p[j] - hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// One JSON-lines row of the metric log.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_ms: f64,
    pub loss_rot: f64,
    pub loss_total: f64,
    pub rot_acc: f64,
    pub pairs_pos: f64,
    pub pairs_neg: f64,
    pub inertia: f64,
}

/// One full pass over the dataset with a fresh pseudo-label table.
pub fn train_epoch<T: Scalar>(
    model: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    pseudo: &PseudoLabelTable<T>,
    images: &Tensor<T>,
    cfg: &ExperimentConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    let (n, c, h, w) = images.dims4()?;
    let batch = cfg.p * cfg.m;
    let steps = n / batch;
    if steps == 0 {
        return Err(Error::Argument(format!(
            "train_epoch: dataset of {n} images is smaller than one {batch}-image batch"
        )));
    }
    if n < ROTATION_UNIQUE {
        return Err(Error::Argument(format!(
            "train_epoch: rotation batches need >= {ROTATION_UNIQUE} images, dataset has {n}"
        )));
    }
    let hyper = cfg.loss_hyper::<T>();
    let adam_hp = AdamParams::new(T::from_f64(cfg.lr));
    let per = c * h * w;

    let mut sum_metric = 0.0;
    let mut sum_rot = 0.0;
    let mut sum_total = 0.0;
    let mut sum_pos = 0.0;
    let mut sum_neg = 0.0;
    let mut rot_correct = 0usize;
    let mut rot_rows = 0usize;

    for step in 0..steps {
        let sample_seed = derive(cfg.seed, Stream::Sample, epoch as u64, step as u64);
        let indices = sample_pk_batch(pseudo, cfg.p, cfg.m, sample_seed)?;
        let batch_labels: Vec<usize> = indices.iter().map(|&i| pseudo.labels[i]).collect();
        let mut metric_data = Vec::with_capacity(indices.len() * per);
        for &i in &indices {
            let img = &images.data()[i * per..(i + 1) * per];
            let aug_seed = derive(cfg.seed, Stream::Augment, epoch as u64, i as u64);
            metric_data.extend(augment(img, c, h, w, aug_seed));
        }
        let metric_images = Tensor::new(vec![indices.len(), c, h, w], metric_data)?;

        // rotation images: an independent uniform draw from the full dataset
        let mut rot_rng =
            ChaCha8Rng::seed_from_u64(derive(cfg.seed, Stream::Rotation, epoch as u64, step as u64));
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..ROTATION_UNIQUE {
            let j = rot_rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut rot_base = Vec::with_capacity(ROTATION_UNIQUE * per);
        for &i in &pool[..ROTATION_UNIQUE] {
            let img = &images.data()[i * per..(i + 1) * per];
            let aug_seed = derive(cfg.seed, Stream::Augment, epoch as u64, i as u64);
            rot_base.extend(augment(img, c, h, w, aug_seed));
        }
        let rot_unique = Tensor::new(vec![ROTATION_UNIQUE, c, h, w], rot_base)?;
        let (rot_images, z) =
            build_rotation_batch(&rot_unique, &(0..ROTATION_UNIQUE).collect::<Vec<_>>())?;

        let mut tape = Tape::new();
        let ids = model.insert_into(&mut tape, true);
        let x_metric = tape.constant(metric_images);
        let feats = backbone_forward(&mut tape, &model.spec, &ids, x_metric)?;
        let emb_id = embed(&mut tape, &ids, feats)?;
        let s_mat = similarity_matrix(&mut tape, emb_id)?;
        let pairs = mine_pairs(tape.value(s_mat), &batch_labels, hyper.epsilon)?;
        let l_metric = metric_loss(&mut tape, cfg.loss, s_mat, &pairs, &hyper)?;

        let x_rot = tape.constant(rot_images);
        let feats_rot = backbone_forward(&mut tape, &model.spec, &ids, x_rot)?;
        let logits = rotation_logits(&mut tape, &ids, feats_rot)?;
        let l_rot = rotation_loss(&mut tape, logits, &z)?;
        let total = combined_loss(&mut tape, l_metric, l_rot, hyper.eta)?;

        let lm = tape.scalar_value(l_metric).to_f64();
        let lr_ = tape.scalar_value(l_rot).to_f64();
        let lt = tape.scalar_value(total).to_f64();
        if !lt.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {lt} at epoch {epoch} step {step}"
            )));
        }
        let logits_v = tape.value(logits);
        for (row, &zi) in z.iter().enumerate() {
            let scores = logits_v.row(row);
            let mut best = 0usize;
            for j in 1..scores.len() {
                if scores[j] > scores[best] {
                    best = j;
                }
            }
            if best == zi {
                rot_correct += 1;
            }
            rot_rows += 1;
        }

        tape.backward(total)?;
        let grads = model.collect_grads(&tape, &ids);
        adam_step(model, &grads, adam, &adam_hp)?;

        sum_metric += lm;
        sum_rot += lr_;
        sum_total += lt;
        sum_pos += pairs.total_positives() as f64;
        sum_neg += pairs.total_negatives() as f64;
    }

    let steps_f = steps as f64;
    Ok(EpochMetrics {
        epoch,
        loss_ms: sum_metric / steps_f,
        loss_rot: sum_rot / steps_f,
        loss_total: sum_total / steps_f,
        rot_acc: rot_correct as f64 / rot_rows as f64,
        pairs_pos: sum_pos / steps_f,
        pairs_neg: sum_neg / steps_f,
        inertia: pseudo.inertia.to_f64(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: ModelParams<T>,
    pub adam: AdamState<T>,
    pub history: Vec<EpochMetrics>,
    pub pseudo: PseudoLabelTable<T>,
}

/// Fresh run: init from the seed, cluster features before epoch 0, recluster
/// embeddings before every later epoch. With an output directory, writes the
/// metric log after every epoch and checkpoints periodically and at the end.
pub fn run_training<T: Scalar>(
    cfg: &ExperimentConfig,
    images: &Tensor<T>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let spec = cfg.backbone_spec()?;
    let model = init_params::<T>(&spec, cfg.d_embed, derive(cfg.seed, Stream::Init, 0, 0))?;
    let adam = AdamState::new(&model);
    train_loop(cfg, images, model, adam, Vec::new(), out_dir)
}

/// Continues a checkpointed run; epochs already in the history are skipped.
/// Per-epoch seeds are pure functions of (seed, epoch), so the result is
/// bit-identical to a run that never stopped.
pub fn resume_training<T: Scalar>(
    cfg: &ExperimentConfig,
    images: &Tensor<T>,
    ckpt: Checkpoint<T>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if ckpt.history.len() != ckpt.epoch {
        return Err(Error::Contract(format!(
            "checkpoint history has {} rows for {} completed epochs",
            ckpt.history.len(),
            ckpt.epoch
        )));
    }
    train_loop(cfg, images, ckpt.model, ckpt.adam, ckpt.history, out_dir)
}

fn train_loop<T: Scalar>(
    cfg: &ExperimentConfig,
    images: &Tensor<T>,
    mut model: ModelParams<T>,
    mut adam: AdamState<T>,
    mut history: Vec<EpochMetrics>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    let (n, c, h, w) = images.dims4()?;
    let spec = cfg.backbone_spec()?;
    if (c, h, w) != spec.input {
        return Err(Error::Dimension(format!(
            "dataset geometry {:?} does not match backbone input {:?}",
            (c, h, w),
            spec.input
        )));
    }
    if cfg.k > n {
        return Err(Error::Argument(format!(
            "k={} clusters for only {n} images",
            cfg.k
        )));
    }
    if let Some(dir) = out_dir {
        // fail fast before spending any compute
        std::fs::create_dir_all(dir)?;
        let probe = dir.join(".write_probe");
        std::fs::write(&probe, b"ok")?;
        std::fs::remove_file(&probe)?;
    }
    let opts = KmeansOpts {
        workers: cfg.workers,
        ..KmeansOpts::default()
    };

    let start = history.len();
    let mut last_pseudo: Option<PseudoLabelTable<T>> = None;
    for epoch in start..cfg.epochs {
        let cluster_seed = derive(cfg.seed, Stream::Cluster, epoch as u64, 0);
        let mut table = if epoch == 0 {
            let feats = initial_features(&model, images)?;
            kmeans(&feats, cfg.k, cluster_seed, &opts)?
        } else {
            recluster_embeddings(&model, images, cfg.k, cluster_seed, &opts)?
        };
        table.epoch_stamp = epoch;

        let metrics = train_epoch(&mut model, &mut adam, &table, images, cfg, epoch)?;
        history.push(metrics);
        last_pseudo = Some(table);

        if let Some(dir) = out_dir {
            write_metrics_log(&dir.join("metrics.jsonl"), &history)?;
            let done = epoch + 1 == cfg.epochs;
            if done || (epoch + 1) % cfg.checkpoint_every == 0 {
                let ckpt = Checkpoint {
                    config: cfg.to_json(),
                    epoch: history.len(),
                    model: model.clone(),
                    adam: adam.clone(),
                    history: history.clone(),
                };
                let name = if done {
                    "checkpoint.udml".to_string()
                } else {
                    format!("checkpoint_epoch{}.udml", epoch + 1)
                };
                ckpt.save(&dir.join(name))?;
            }
        }
    }

    let pseudo = match last_pseudo {
        Some(t) => t,
        // resume that had nothing left to do: rebuild the table for inspection
        None => recluster_embeddings(
            &model,
            images,
            cfg.k,
            derive(cfg.seed, Stream::Cluster, cfg.epochs as u64, 0),
            &opts,
        )?,
    };
    Ok(TrainOutcome {
        model,
        adam,
        history,
        pseudo,
    })
}

/// Rewrites the whole log atomically: one JSON object per completed epoch.
pub fn write_metrics_log(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut text = String::new();
    for row in history {
        text.push_str(&serde_json::to_string(row).expect("metrics serialize"));
        text.push('\n');
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Accuracy of the rotation head over all four rotations of every image,
/// inference mode, no augmentation.
pub fn rotation_accuracy<T: Scalar>(model: &ModelParams<T>, images: &Tensor<T>) -> Result<f64> {
    let (n, c, h, w) = images.dims4()?;
    let per = c * h * w;
    let mut correct = 0usize;
    let mut total = 0usize;
    let chunk = 64usize;
    let mut start = 0usize;
    while start < n {
        let take = chunk.min(n - start);
        let part = Tensor::new(
            vec![take, c, h, w],
            images.data()[start * per..(start + take) * per].to_vec(),
        )?;
        let (batch, z) = build_rotation_batch(&part, &(0..take).collect::<Vec<_>>())?;
        let logits = model.rotation_logits_values(&batch)?;
        for (row, &zi) in z.iter().enumerate() {
            let scores = logits.row(row);
            let mut best = 0usize;
            for j in 1..scores.len() {
                if scores[j] > scores[best] {
                    best = j;
                }
            }
            if best == zi {
                correct += 1;
            }
            total += 1;
        }
        start += take;
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::model::BackboneSpec;

    fn tiny_model(seed: u64) -> ModelParams<f64> {
        let spec = BackboneSpec::new(crate::model::BackboneKind::SmallConv, vec![2, 3], (1, 16, 16))
            .unwrap();
        init_params(&spec, 4, seed).unwrap()
    }

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.k = 3;
        cfg.p = 2;
        cfg.m = 4;
        cfg.epochs = 2;
        cfg.image_size = 16;
        cfg.channels = vec![2, 3];
        cfg.d_embed = 4;
        cfg.synth_classes = 3;
        cfg.synth_per_class = 8;
        cfg.checkpoint_every = 1;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn adam_zero_gradient_leaves_params_and_advances_t() {
        let mut model = tiny_model(0);
        let before = model.clone();
        let grads: Vec<Tensor<f64>> = model
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let mut state = AdamState::new(&model);
        adam_step(&mut model, &grads, &mut state, &AdamParams::new(1e-3)).unwrap();
        assert_eq!(model, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut model = tiny_model(0);
        let mut grads: Vec<Tensor<f64>> = model
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        grads[0].data_mut()[0] = 0.5;
        let before = model.named_tensors()[0].1.data()[0];
        let mut state = AdamState::new(&model);
        adam_step(&mut model, &grads, &mut state, &AdamParams::new(1e-3)).unwrap();
        let after = model.named_tensors()[0].1.data()[0];
        // bias corrections cancel: update ~ -lr * g/|g|
        assert!((before - after - 1e-3).abs() < 1e-8, "step {}", before - after);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_naming_parameter() {
        let mut model = tiny_model(0);
        let mut grads: Vec<Tensor<f64>> = model
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        grads[1].data_mut()[0] = f64::NAN;
        let name = model.named_tensors()[1].0.clone();
        let mut state = AdamState::new(&model);
        let err = adam_step(&mut model, &grads, &mut state, &AdamParams::new(1e-3))
            .unwrap_err()
            .to_string();
        assert!(err.contains(&name), "{err}");
    }

    #[test]
    fn adam_checkpoint_replay_matches_two_straight_steps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.udml");
        let make_grads = |model: &ModelParams<f32>, scale: f32| -> Vec<Tensor<f32>> {
            model
                .named_tensors()
                .iter()
                .map(|(_, t)| {
                    let data: Vec<f32> =
                        (0..t.numel()).map(|j| scale * ((j % 7) as f32 - 3.0)).collect();
                    Tensor::new(t.shape().to_vec(), data).unwrap()
                })
                .collect()
        };
        let cfg = tiny_cfg();
        let spec = cfg.backbone_spec().unwrap();
        let mut a: ModelParams<f32> = init_params(&spec, cfg.d_embed, 1).unwrap();
        let mut sa = AdamState::new(&a);
        let hp = AdamParams::new(1e-3);
        let g1 = make_grads(&a, 0.1);
        adam_step(&mut a, &g1, &mut sa, &hp).unwrap();

        // checkpoint after one step, reload, then both take step two
        Checkpoint {
            config: cfg.to_json(),
            epoch: 0,
            model: a.clone(),
            adam: sa.clone(),
            history: vec![],
        }
        .save(&path)
        .unwrap();
        let loaded = Checkpoint::<f32>::load(&path).unwrap();
        let mut b = loaded.model;
        let mut sb = loaded.adam;

        let g2 = make_grads(&a, -0.05);
        adam_step(&mut a, &g2, &mut sa, &hp).unwrap();
        adam_step(&mut b, &g2, &mut sb, &hp).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa.m, sb.m);
        assert_eq!(sa.v, sb.v);
        assert_eq!(sa.t, sb.t);
    }

    #[test]
    fn eta_zero_never_touches_rotation_head() {
        let mut cfg = tiny_cfg();
        cfg.eta = 0.0;
        let ds = synth_dataset::<f64>(cfg.synth_classes, cfg.synth_per_class, 16, 4).unwrap();
        let outcome = run_training::<f64>(&cfg, &ds.images, None).unwrap();
        let spec = cfg.backbone_spec().unwrap();
        let fresh: ModelParams<f64> =
            init_params(&spec, cfg.d_embed, derive(cfg.seed, Stream::Init, 0, 0)).unwrap();
        assert_eq!(outcome.model.rot_w, fresh.rot_w);
        assert_eq!(outcome.model.rot_b, fresh.rot_b);
        assert_ne!(outcome.model.embed_w, fresh.embed_w);
    }

    #[test]
    fn metric_log_is_finite_and_sized() {
        let cfg = tiny_cfg();
        let ds = synth_dataset::<f64>(cfg.synth_classes, cfg.synth_per_class, 16, 4).unwrap();
        let outcome = run_training::<f64>(&cfg, &ds.images, None).unwrap();
        assert_eq!(outcome.history.len(), cfg.epochs);
        for row in &outcome.history {
            assert!(row.loss_total.is_finite());
            assert!(row.pairs_pos + row.pairs_neg > 0.0);
        }
    }

    #[test]
    fn run_training_writes_outputs_and_fails_fast_on_bad_dir() {
        let cfg = tiny_cfg();
        let ds = synth_dataset::<f64>(cfg.synth_classes, cfg.synth_per_class, 16, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        run_training::<f64>(&cfg, &ds.images, Some(&out)).unwrap();
        assert!(out.join("metrics.jsonl").exists());
        assert!(out.join("checkpoint.udml").exists());
        assert!(out.join("checkpoint_epoch1.udml").exists());
        let text = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
        assert_eq!(text.lines().count(), cfg.epochs);

        // a file where the directory should be fails before training
        let blocked = dir.path().join("blocked");
        std::fs::write(&blocked, b"file").unwrap();
        assert!(run_training::<f64>(&cfg, &ds.images, Some(&blocked)).is_err());
    }
}
