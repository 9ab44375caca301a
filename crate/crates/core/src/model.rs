//! The embedding network: a shared backbone with two heads.
//!
//! The backbone maps images to pooled feature vectors. On top of it sit two
//! separate fully connected heads: one projects features to L2-normalized
//! embedding vectors for metric learning, the other produces 4-way logits for
//! rotation prediction. Both heads backpropagate into the shared backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Tape, TensorId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Norm floor for embedding normalization.
pub const EMBED_NORM_EPS: f64 = 1e-12;
/// Rotation head always predicts one of four quarter turns.
pub const ROTATION_CLASSES: usize = 4;

const CONV_K: usize = 3;
const CONV_STRIDE: usize = 2;
const CONV_PAD: usize = 1;

/// Inference helpers process this many images per tape. Ops are row-wise
/// independent, so chunking never changes values.
const CHUNK: usize = 256;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    SmallConv,
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// Conv channel widths (small_conv) or hidden layer widths (mlp).
    /// The last entry is the feature width.
    pub channels: Vec<usize>,
    /// Input geometry (c, h, w).
    pub input: (usize, usize, usize),
}

impl BackboneSpec {
    /// conv3x3(16,s2) -> relu -> conv3x3(32,s2) -> relu -> conv3x3(64,s2)
    /// -> relu -> global_avg_pool on 32x32 grayscale input.
    pub fn small_conv_default() -> Self {
        BackboneSpec {
            kind: BackboneKind::SmallConv,
            channels: vec![16, 32, 64],
            input: (1, 32, 32),
        }
    }

    pub fn new(kind: BackboneKind, channels: Vec<usize>, input: (usize, usize, usize)) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) {
            return Err(Error::Argument(
                "backbone channel widths must be positive and nonempty".into(),
            ));
        }
        if input.0 == 0 || input.1 == 0 || input.2 == 0 {
            return Err(Error::Argument("backbone input extents must be positive".into()));
        }
        if kind == BackboneKind::SmallConv {
            let min = 1usize << channels.len();
            if input.1 < min || input.2 < min {
                return Err(Error::Argument(format!(
                    "small_conv with {} stride-2 layers needs input >= {min}, got {}x{}",
                    channels.len(),
                    input.1,
                    input.2
                )));
            }
        }
        Ok(BackboneSpec { kind, channels, input })
    }

    pub fn d_feat(&self) -> usize {
        *self.channels.last().expect("nonempty channels")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv { kernel: Tensor<T> },
    Dense { w: Tensor<T>, b: Tensor<T> },
}

/// All learned parameters: backbone layers plus the two heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub spec: BackboneSpec,
    pub d_embed: usize,
    pub backbone: Vec<Layer<T>>,
    pub embed_w: Tensor<T>,
    pub embed_b: Tensor<T>,
    pub rot_w: Tensor<T>,
    pub rot_b: Tensor<T>,
}

/// Tape handles for one insertion of the parameters.
pub struct ParamIds {
    pub backbone: Vec<LayerIds>,
    pub embed_w: TensorId,
    pub embed_b: TensorId,
    pub rot_w: TensorId,
    pub rot_b: TensorId,
}

pub enum LayerIds {
    Conv { kernel: TensorId },
    Dense { w: TensorId, b: TensorId },
}

/// He-style init: weights ~ N(0, 2/fan_in), biases zero, deterministic in the
/// seed.
pub fn init_params<T: Scalar>(spec: &BackboneSpec, d_embed: usize, seed: u64) -> Result<ModelParams<T>> {
    if d_embed == 0 {
        return Err(Error::Argument("d_embed must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |fan_in: usize, shape: Vec<usize>| -> Tensor<T> {
        let std = T::from_f64((2.0 / fan_in as f64).sqrt());
        let numel: usize = shape.iter().product();
        let data: Vec<T> = (0..numel)
            .map(|_| T::sample_standard_normal(&mut rng) * std)
            .collect();
        Tensor::new(shape, data).expect("init shape")
    };

    let (c, h, w) = spec.input;
    let mut backbone = Vec::with_capacity(spec.channels.len());
    match spec.kind {
        BackboneKind::SmallConv => {
            let mut c_in = c;
            for &c_out in &spec.channels {
                let kernel = sample(c_in * CONV_K * CONV_K, vec![c_out, c_in, CONV_K, CONV_K]);
                backbone.push(Layer::Conv { kernel });
                c_in = c_out;
            }
        }
        BackboneKind::Mlp => {
            let mut d_in = c * h * w;
            for &width in &spec.channels {
                let wt = sample(d_in, vec![d_in, width]);
                backbone.push(Layer::Dense {
                    w: wt,
                    b: Tensor::zeros(vec![width]),
                });
                d_in = width;
            }
        }
    }
    let d_feat = spec.d_feat();
    let embed_w = sample(d_feat, vec![d_feat, d_embed]);
    let rot_w = sample(d_feat, vec![d_feat, ROTATION_CLASSES]);
    Ok(ModelParams {
        spec: spec.clone(),
        d_embed,
        backbone,
        embed_w,
        embed_b: Tensor::zeros(vec![d_embed]),
        rot_w,
        rot_b: Tensor::zeros(vec![ROTATION_CLASSES]),
    })
}

impl<T: Scalar> ModelParams<T> {
    /// Canonical (name, tensor) order used by the optimizer and checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.iter().enumerate() {
            match layer {
                Layer::Conv { kernel } => out.push((format!("backbone.{i}.kernel"), kernel)),
                Layer::Dense { w, b } => {
                    out.push((format!("backbone.{i}.w"), w));
                    out.push((format!("backbone.{i}.b"), b));
                }
            }
        }
        out.push(("embed.w".into(), &self.embed_w));
        out.push(("embed.b".into(), &self.embed_b));
        out.push(("rot.w".into(), &self.rot_w));
        out.push(("rot.b".into(), &self.rot_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for (i, layer) in self.backbone.iter_mut().enumerate() {
            match layer {
                Layer::Conv { kernel } => out.push((format!("backbone.{i}.kernel"), kernel)),
                Layer::Dense { w, b } => {
                    out.push((format!("backbone.{i}.w"), w));
                    out.push((format!("backbone.{i}.b"), b));
                }
            }
        }
        out.push(("embed.w".into(), &mut self.embed_w));
        out.push(("embed.b".into(), &mut self.embed_b));
        out.push(("rot.w".into(), &mut self.rot_w));
        out.push(("rot.b".into(), &mut self.rot_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Inserts every parameter as a tape leaf.
    pub fn insert_into(&self, tape: &mut Tape<T>, trainable: bool) -> ParamIds {
        let backbone = self
            .backbone
            .iter()
            .map(|layer| match layer {
                Layer::Conv { kernel } => LayerIds::Conv {
                    kernel: tape.leaf(kernel.clone(), trainable),
                },
                Layer::Dense { w, b } => LayerIds::Dense {
                    w: tape.leaf(w.clone(), trainable),
                    b: tape.leaf(b.clone(), trainable),
                },
            })
            .collect();
        ParamIds {
            backbone,
            embed_w: tape.leaf(self.embed_w.clone(), trainable),
            embed_b: tape.leaf(self.embed_b.clone(), trainable),
            rot_w: tape.leaf(self.rot_w.clone(), trainable),
            rot_b: tape.leaf(self.rot_b.clone(), trainable),
        }
    }

    /// Gradients in `named_tensors` order; parameters unreached by backward
    /// yield zeros.
    pub fn collect_grads(&self, tape: &Tape<T>, ids: &ParamIds) -> Vec<Tensor<T>> {
        let mut grads = Vec::new();
        let mut take = |id: TensorId, shape: &[usize]| {
            grads.push(
                tape.grad_tensor(id)
                    .unwrap_or_else(|| Tensor::zeros(shape.to_vec())),
            );
        };
        for (layer, lids) in self.backbone.iter().zip(&ids.backbone) {
            match (layer, lids) {
                (Layer::Conv { kernel }, LayerIds::Conv { kernel: kid }) => {
                    take(*kid, kernel.shape())
                }
                (Layer::Dense { w, b }, LayerIds::Dense { w: wid, b: bid }) => {
                    take(*wid, w.shape());
                    take(*bid, b.shape());
                }
                _ => unreachable!("layer/id structure mismatch"),
            }
        }
        take(ids.embed_w, self.embed_w.shape());
        take(ids.embed_b, self.embed_b.shape());
        take(ids.rot_w, self.rot_w.shape());
        take(ids.rot_b, self.rot_b.shape());
        grads
    }

    // ── inference-mode helpers (fresh throwaway tape, chunked) ────────

    /// Pooled backbone features for a whole image tensor.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.run_chunked(images, |tape, ids, x| backbone_forward(tape, &self.spec, ids, x))
    }

    /// Unit-norm embedding rows for a whole image tensor.
    pub fn embeddings(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.run_chunked(images, |tape, ids, x| {
            let feats = backbone_forward(tape, &self.spec, ids, x)?;
            embed(tape, ids, feats)
        })
    }

    /// Rotation logits for a whole image tensor.
    pub fn rotation_logits_values(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.run_chunked(images, |tape, ids, x| {
            let feats = backbone_forward(tape, &self.spec, ids, x)?;
            rotation_logits(tape, ids, feats)
        })
    }

    fn run_chunked(
        &self,
        images: &Tensor<T>,
        f: impl Fn(&mut Tape<T>, &ParamIds, TensorId) -> Result<TensorId>,
    ) -> Result<Tensor<T>> {
        let (n, c, h, w) = images.dims4()?;
        let per = c * h * w;
        let mut rows: Vec<Tensor<T>> = Vec::new();
        let mut start = 0;
        while start < n {
            let take = CHUNK.min(n - start);
            let chunk = Tensor::new(
                vec![take, c, h, w],
                images.data()[start * per..(start + take) * per].to_vec(),
            )?;
            let mut tape = Tape::new();
            let ids = self.insert_into(&mut tape, false);
            let x = tape.constant(chunk);
            let out = f(&mut tape, &ids, x)?;
            rows.push(tape.value(out).clone());
            start += take;
        }
        let width = rows[0].shape()[1];
        let data: Vec<T> = rows.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(vec![n, width], data)
    }
}

/// Backbone forward pass on a live tape: images `[n,c,h,w]` to features
/// `[n,d_feat]`.
pub fn backbone_forward<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &BackboneSpec,
    ids: &ParamIds,
    images: TensorId,
) -> Result<TensorId> {
    let (n, c, h, w) = tape.value(images).dims4()?;
    if (c, h, w) != spec.input {
        return Err(Error::Dimension(format!(
            "backbone expects images of {:?}, got {:?}",
            spec.input,
            (c, h, w)
        )));
    }
    match spec.kind {
        BackboneKind::SmallConv => {
            let mut cur = images;
            for lids in &ids.backbone {
                let LayerIds::Conv { kernel } = lids else {
                    return Err(Error::Contract("conv backbone with dense layer ids".into()));
                };
                let conv = tape.conv2d(cur, *kernel, CONV_STRIDE, CONV_PAD)?;
                cur = tape.relu(conv);
            }
            tape.global_avg_pool(cur)
        }
        BackboneKind::Mlp => {
            let mut cur = tape.reshape(images, vec![n, c * h * w])?;
            for lids in &ids.backbone {
                let LayerIds::Dense { w, b } = lids else {
                    return Err(Error::Contract("mlp backbone with conv layer ids".into()));
                };
                let lin = tape.linear(cur, *w, *b)?;
                cur = tape.relu(lin);
            }
            Ok(cur)
        }
    }
}

/// Embedding head: linear projection then row normalization to unit length.
pub fn embed<T: Scalar>(tape: &mut Tape<T>, ids: &ParamIds, features: TensorId) -> Result<TensorId> {
    let lin = tape.linear(features, ids.embed_w, ids.embed_b)?;
    tape.l2_normalize_rows(lin, T::from_f64(EMBED_NORM_EPS))
}

/// Rotation head: unnormalized 4-way class scores.
pub fn rotation_logits<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &ParamIds,
    features: TensorId,
) -> Result<TensorId> {
    tape.linear(features, ids.rot_w, ids.rot_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> BackboneSpec {
        BackboneSpec::new(BackboneKind::SmallConv, vec![3, 4], (1, 8, 8)).unwrap()
    }

    fn images(n: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * 64).map(|_| rng.random::<f64>()).collect();
        Tensor::new(vec![n, 1, 8, 8], data).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = BackboneSpec::small_conv_default();
        let a: ModelParams<f32> = init_params(&spec, 32, 11).unwrap();
        let b: ModelParams<f32> = init_params(&spec, 32, 11).unwrap();
        let c: ModelParams<f32> = init_params(&spec, 32, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn param_count_matches_layer_size_sum() {
        // conv kernels 16*1*9 + 32*16*9 + 64*32*9, embed 64*32+32, rot 64*4+4
        let spec = BackboneSpec::small_conv_default();
        let p: ModelParams<f64> = init_params(&spec, 32, 0).unwrap();
        let expected = 16 * 9 + 32 * 16 * 9 + 64 * 32 * 9 + (64 * 32 + 32) + (64 * 4 + 4);
        assert_eq!(p.param_count(), expected);
        assert_eq!(expected, 25_524);
    }

    #[test]
    fn zero_images_give_zero_features() {
        let p: ModelParams<f64> = init_params(&tiny_spec(), 4, 3).unwrap();
        let feats = p.features(&Tensor::zeros(vec![2, 1, 8, 8])).unwrap();
        assert!(feats.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_batch_independent() {
        let p: ModelParams<f64> = init_params(&tiny_spec(), 4, 5).unwrap();
        let two = images(2, 9);
        let one = Tensor::new(vec![1, 1, 8, 8], two.data()[..64].to_vec()).unwrap();
        let f2 = p.features(&two).unwrap();
        let f1 = p.features(&one).unwrap();
        assert_eq!(f1.row(0), f2.row(0));
        let e2 = p.embeddings(&two).unwrap();
        let e1 = p.embeddings(&one).unwrap();
        assert_eq!(e1.row(0), e2.row(0));
    }

    #[test]
    fn embeddings_have_unit_rows() {
        let p: ModelParams<f64> = init_params(&tiny_spec(), 4, 7).unwrap();
        let emb = p.embeddings(&images(5, 1)).unwrap();
        for i in 0..5 {
            let norm: f64 = emb.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "row {i} norm {norm}");
        }
    }

    #[test]
    fn duplicated_feature_rows_embed_identically() {
        let p: ModelParams<f64> = init_params(&tiny_spec(), 4, 2).unwrap();
        let one = images(1, 4);
        let mut dup = one.data().to_vec();
        dup.extend_from_slice(one.data());
        let both = Tensor::new(vec![2, 1, 8, 8], dup).unwrap();
        let emb = p.embeddings(&both).unwrap();
        assert_eq!(emb.row(0), emb.row(1));
    }

    #[test]
    fn embedding_widths_from_fig5_sweep_are_accepted() {
        for d in [64, 128, 256, 512, 1024] {
            let p: ModelParams<f32> = init_params(&tiny_spec(), d, 0).unwrap();
            let emb = p.embeddings(&Tensor::zeros(vec![1, 1, 8, 8])).unwrap();
            assert_eq!(emb.shape(), &[1, d]);
        }
    }

    #[test]
    fn rotation_logits_are_four_wide_and_zero_for_zero_head() {
        let mut p: ModelParams<f64> = init_params(&tiny_spec(), 4, 2).unwrap();
        p.rot_w = Tensor::zeros(vec![p.spec.d_feat(), 4]);
        let logits = p.rotation_logits_values(&images(3, 8)).unwrap();
        assert_eq!(logits.shape(), &[3, 4]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
        // uniform logits mean cross-entropy = ln 4
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let ce = tape.softmax_cross_entropy(l, &[0, 1, 2]).unwrap();
        assert!((tape.scalar_value(ce) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn both_heads_share_the_backbone() {
        let p: ModelParams<f64> = init_params(&tiny_spec(), 4, 6).unwrap();
        let imgs = images(2, 3);
        let emb_before = p.embeddings(&imgs).unwrap();
        let rot_before = p.rotation_logits_values(&imgs).unwrap();
        let mut perturbed = p.clone();
        match &mut perturbed.backbone[0] {
            Layer::Conv { kernel } => kernel.data_mut()[0] += 0.5,
            Layer::Dense { w, .. } => w.data_mut()[0] += 0.5,
        }
        let emb_after = perturbed.embeddings(&imgs).unwrap();
        let rot_after = perturbed.rotation_logits_values(&imgs).unwrap();
        assert_ne!(emb_before, emb_after);
        assert_ne!(rot_before, rot_after);
    }

    #[test]
    fn backbone_rejects_wrong_geometry() {
        let p: ModelParams<f64> = init_params(&tiny_spec(), 4, 6).unwrap();
        let err = p.features(&Tensor::zeros(vec![1, 1, 6, 6])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn mlp_backbone_runs() {
        let spec = BackboneSpec::new(BackboneKind::Mlp, vec![10, 6], (1, 8, 8)).unwrap();
        let p: ModelParams<f64> = init_params(&spec, 4, 1).unwrap();
        let feats = p.features(&images(3, 2)).unwrap();
        assert_eq!(feats.shape(), &[3, 6]);
        let emb = p.embeddings(&images(3, 2)).unwrap();
        assert_eq!(emb.shape(), &[3, 4]);
    }
}
