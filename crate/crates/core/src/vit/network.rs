use super::config::ViTConfig;
use super::model::{Gradients, Params, Trainable, ViTModel};
use super::ops::{
    axpy, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, softmax_in_place, LnCache,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Activations of one forward call, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    config: ViTConfig,
    generation: u64,
    training: bool,
    samples: Vec<SampleCache>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.samples.len()
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Post-softmax attention of one sample and layer, laid out `[heads, T, T]`,
    /// before attention dropout.
    pub fn attention(&self, sample: usize, layer: usize) -> &[f64] {
        &self.samples[sample].layers[layer].attn
    }
}

#[derive(Debug, Clone)]
struct SampleCache {
    patches: Vec<f64>,
    embed_mask: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
    cls_out: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    ln1_out: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    attn_mask: Option<Vec<f64>>,
    ctx: Vec<f64>,
    proj_mask: Option<Vec<f64>>,
    ln2: LnCache,
    ln2_out: Vec<f64>,
    fc1_out: Vec<f64>,
    act: Vec<f64>,
    act_mask: Option<Vec<f64>>,
    mlp_mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub cache: ForwardCache,
}

/// Inverted-dropout scale factors (0 or 1/(1-p)), or `None` when inactive.
fn dropout_mask(len: usize, p: f64, active: bool, rng: &mut Rng) -> Option<Vec<f64>> {
    if !active || p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some((0..len).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect())
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
    }
}

fn masked(dy: &[f64], mask: &Option<Vec<f64>>) -> Vec<f64> {
    let mut out = dy.to_vec();
    apply_mask(&mut out, mask);
    out
}

/// Flattens a channel-first image into `[num_patches, 3·p·p]`, each patch in
/// `(channel, row, column)` order.
fn patchify(image: &[f64], cfg: &ViTConfig) -> Vec<f64> {
    let (s, p, g) = (cfg.image_size, cfg.patch_size, cfg.grid());
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for py in 0..g {
        for px in 0..g {
            for c in 0..3 {
                for ky in 0..p {
                    let row = (c * s + py * p + ky) * s + px * p;
                    out.extend_from_slice(&image[row..row + p]);
                }
            }
        }
    }
    out
}

/// Runs the classifier on a `B×3×H×W` batch. Dropout is active only when `training`.
pub fn forward(model: &ViTModel, batch: &Tensor, training: bool, rng: &mut Rng) -> Result<ForwardOutput> {
    let cfg = model.config();
    let s = cfg.image_size;
    let b = match batch.shape() {
        [b, 3, h, w] if *h == s && *w == s && *b > 0 => *b,
        shape => {
            return Err(Error::Argument(format!(
                "expected a batch of shape [B, 3, {s}, {s}], got {shape:?}"
            )))
        }
    };
    let classes = cfg.num_classes;
    let mut logits = Vec::with_capacity(b * classes);
    let mut samples = Vec::with_capacity(b);
    let per_image = 3 * s * s;
    for i in 0..b {
        let image = &batch.data()[i * per_image..(i + 1) * per_image];
        let (sample, row) = forward_one(&model.params, cfg, image, training, rng);
        logits.extend_from_slice(&row);
        samples.push(sample);
    }
    Ok(ForwardOutput {
        logits: Tensor::new(vec![b, classes], logits)?,
        cache: ForwardCache {
            config: cfg.clone(),
            generation: model.generation,
            training,
            samples,
        },
    })
}

fn forward_one(p: &Params, cfg: &ViTConfig, image: &[f64], training: bool, rng: &mut Rng) -> (SampleCache, Vec<f64>) {
    let d = cfg.hidden_dim;
    let t = cfg.seq_len();
    let n = cfg.num_patches();
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let patches = patchify(image, cfg);
    let tokens = linear(&patches, n, &p.patch_embed);
    let mut x = Vec::with_capacity(t * d);
    x.extend_from_slice(p.cls_token.data());
    x.extend_from_slice(&tokens);
    x.iter_mut().zip(p.pos_embed.data()).for_each(|(v, e)| *v += e);
    let embed_mask = dropout_mask(t * d, cfg.dropout_hidden, training, rng);
    apply_mask(&mut x, &embed_mask);

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for blk in &p.blocks {
        let (ln1_out, ln1) = layer_norm(&x, t, &blk.norm1);
        let q = linear(&ln1_out, t, &blk.q);
        let k = linear(&ln1_out, t, &blk.k);
        let v = linear(&ln1_out, t, &blk.v);

        let mut attn = vec![0.0; heads * t * t];
        for h in 0..heads {
            for i in 0..t {
                let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
                let row = &mut attn[(h * t + i) * t..(h * t + i + 1) * t];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = scale * dot(qi, &k[j * d + h * dh..j * d + (h + 1) * dh]);
                }
                softmax_in_place(row);
            }
        }
        let attn_mask = dropout_mask(heads * t * t, cfg.dropout_attention, training, rng);
        let mut weights = attn.clone();
        apply_mask(&mut weights, &attn_mask);

        let mut ctx = vec![0.0; t * d];
        for h in 0..heads {
            for i in 0..t {
                let out = &mut ctx[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..t {
                    let w = weights[(h * t + i) * t + j];
                    if w != 0.0 {
                        axpy(w, &v[j * d + h * dh..j * d + (h + 1) * dh], out);
                    }
                }
            }
        }
        let mut o = linear(&ctx, t, &blk.proj);
        let proj_mask = dropout_mask(t * d, cfg.dropout_hidden, training, rng);
        apply_mask(&mut o, &proj_mask);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

        let (ln2_out, ln2) = layer_norm(&x, t, &blk.norm2);
        let fc1_out = linear(&ln2_out, t, &blk.fc1);
        let mut act: Vec<f64> = fc1_out.iter().map(|&z| gelu(z)).collect();
        let act_mask = dropout_mask(act.len(), cfg.dropout_hidden, training, rng);
        apply_mask(&mut act, &act_mask);
        let mut m = linear(&act, t, &blk.fc2);
        let mlp_mask = dropout_mask(t * d, cfg.dropout_hidden, training, rng);
        apply_mask(&mut m, &mlp_mask);
        x.iter_mut().zip(&m).for_each(|(a, b)| *a += b);

        layers.push(LayerCache {
            ln1,
            ln1_out,
            q,
            k,
            v,
            attn,
            attn_mask,
            ctx,
            proj_mask,
            ln2,
            ln2_out,
            fc1_out,
            act,
            act_mask,
            mlp_mask,
        });
    }

    // Only the class-token row feeds the head.
    let (cls_out, final_ln) = layer_norm(&x[..d], 1, &p.norm);
    let logits = linear(&cls_out, 1, &p.head);
    (
        SampleCache {
            patches,
            embed_mask,
            layers,
            final_ln,
            cls_out,
        },
        logits,
    )
}

/// Reverse pass for the parameters picked by `trainable`.
///
/// `dlogits` is the loss gradient with respect to the logits of the cached
/// forward call. Fails with a contract error when the cache was produced for a
/// different configuration, batch size, or an earlier version of the weights.
pub fn backward(model: &ViTModel, cache: &ForwardCache, dlogits: &Tensor, trainable: Trainable) -> Result<Gradients> {
    let cfg = model.config();
    if cache.config != *cfg || cache.generation != model.generation {
        return Err(Error::Contract(
            "forward cache does not belong to the current model weights".into(),
        ));
    }
    let b = cache.samples.len();
    if dlogits.shape() != [b, cfg.num_classes] {
        return Err(Error::Contract(format!(
            "dlogits shape {:?} does not match cached batch [{b}, {}]",
            dlogits.shape(),
            cfg.num_classes
        )));
    }
    let mut grads = model.params.zeros_like();
    let head_only = !matches!(trainable, Trainable::Full);
    for (i, sample) in cache.samples.iter().enumerate() {
        backward_one(&model.params, cfg, sample, dlogits.row(i), &mut grads, head_only);
    }
    let entries = grads
        .tensors()
        .into_iter()
        .filter(|(name, _, _)| trainable.selects(name))
        .map(|(name, t, _)| (name, t.clone()))
        .collect();
    Ok(Gradients::new(entries))
}

fn backward_one(p: &Params, cfg: &ViTConfig, sc: &SampleCache, dl: &[f64], g: &mut Params, head_only: bool) {
    let d = cfg.hidden_dim;
    let t = cfg.seq_len();
    let n = cfg.num_patches();
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let d_cls = linear_backward(dl, &sc.cls_out, 1, &p.head, &mut g.head, !head_only);
    let Some(d_cls) = d_cls else { return };

    let mut dx = vec![0.0; t * d];
    let d_row0 = layer_norm_backward(&d_cls, &sc.final_ln, &p.norm, &mut g.norm);
    dx[..d].copy_from_slice(&d_row0);

    for (li, lc) in sc.layers.iter().enumerate().rev() {
        let blk = &p.blocks[li];
        let gb = &mut g.blocks[li];

        // MLP branch
        let dm = masked(&dx, &lc.mlp_mask);
        let da = linear_backward(&dm, &lc.act, t, &blk.fc2, &mut gb.fc2, true).unwrap();
        let mut df = masked(&da, &lc.act_mask);
        df.iter_mut().zip(&lc.fc1_out).for_each(|(v, z)| *v *= gelu_grad(*z));
        let dh2 = linear_backward(&df, &lc.ln2_out, t, &blk.fc1, &mut gb.fc1, true).unwrap();
        let dres = layer_norm_backward(&dh2, &lc.ln2, &blk.norm2, &mut gb.norm2);
        dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);

        // attention branch
        let do_ = masked(&dx, &lc.proj_mask);
        let dctx = linear_backward(&do_, &lc.ctx, t, &blk.proj, &mut gb.proj, true).unwrap();
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            for i in 0..t {
                let base = (h * t + i) * t;
                let probs = &lc.attn[base..base + t];
                let dci = &dctx[i * d + hs.start..i * d + hs.end];
                for j in 0..t {
                    let keep = lc.attn_mask.as_ref().map_or(1.0, |m| m[base + j]);
                    let vj = &lc.v[j * d + hs.start..j * d + hs.end];
                    dp[j] = keep * dot(dci, vj);
                    let w = probs[j] * keep;
                    if w != 0.0 {
                        axpy(w, dci, &mut dv[j * d + hs.start..j * d + hs.end]);
                    }
                }
                let inner: f64 = probs.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qi = &lc.q[i * d + hs.start..i * d + hs.end];
                for j in 0..t {
                    let ds = probs[j] * (dp[j] - inner) * scale;
                    if ds != 0.0 {
                        axpy(
                            ds,
                            &lc.k[j * d + hs.start..j * d + hs.end],
                            &mut dq[i * d + hs.start..i * d + hs.end],
                        );
                        axpy(ds, qi, &mut dk[j * d + hs.start..j * d + hs.end]);
                    }
                }
            }
        }
        let mut dh1 = linear_backward(&dq, &lc.ln1_out, t, &blk.q, &mut gb.q, true).unwrap();
        let dkx = linear_backward(&dk, &lc.ln1_out, t, &blk.k, &mut gb.k, true).unwrap();
        let dvx = linear_backward(&dv, &lc.ln1_out, t, &blk.v, &mut gb.v, true).unwrap();
        for ((a, b), c) in dh1.iter_mut().zip(&dkx).zip(&dvx) {
            *a += b + c;
        }
        let dres = layer_norm_backward(&dh1, &lc.ln1, &blk.norm1, &mut gb.norm1);
        dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);
    }

    let dseq = masked(&dx, &sc.embed_mask);
    g.pos_embed.data_mut().iter_mut().zip(&dseq).for_each(|(a, b)| *a += b);
    g.cls_token
        .data_mut()
        .iter_mut()
        .zip(&dseq[..d])
        .for_each(|(a, b)| *a += b);
    linear_backward(&dseq[d..], &sc.patches, n, &p.patch_embed, &mut g.patch_embed, false);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ops::cross_entropy;

    fn random_batch(cfg: &ViTConfig, b: usize, seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        let n = b * 3 * cfg.image_size * cfg.image_size;
        Tensor::new(
            vec![b, 3, cfg.image_size, cfg.image_size],
            (0..n).map(|_| r.uniform_range(-2.0, 2.0)).collect(),
        )
        .unwrap()
    }

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_dim: 12,
            ..ViTConfig::toy()
        }
    }

    #[test]
    fn patchify_orders_channel_row_column() {
        let cfg = ViTConfig {
            image_size: 4,
            patch_size: 2,
            ..tiny()
        };
        let img: Vec<f64> = (0..48).map(|v| v as f64).collect();
        let p = patchify(&img, &cfg);
        // patch (0, 1): columns 2..4 of rows 0..2, red then green then blue
        assert_eq!(
            &p[12..24],
            &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0, 34.0, 35.0, 38.0, 39.0]
        );
    }

    #[test]
    fn output_shape_and_inference_determinism() {
        let cfg = tiny();
        let model = ViTModel::init(&cfg, &mut Rng::new(1)).unwrap();
        let batch = random_batch(&cfg, 3, 2);
        let a = forward(&model, &batch, false, &mut Rng::new(5)).unwrap();
        let b = forward(&model, &batch, false, &mut Rng::new(99)).unwrap();
        assert_eq!(a.logits.shape(), &[3, 9]);
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn training_mode_is_stochastic() {
        let cfg = tiny();
        let model = ViTModel::init(&cfg, &mut Rng::new(1)).unwrap();
        let batch = random_batch(&cfg, 1, 2);
        let a = forward(&model, &batch, true, &mut Rng::new(5)).unwrap();
        let b = forward(&model, &batch, true, &mut Rng::new(6)).unwrap();
        assert_ne!(a.logits, b.logits);
    }

    #[test]
    fn rejects_wrong_image_size() {
        let cfg = tiny();
        let model = ViTModel::init(&cfg, &mut Rng::new(1)).unwrap();
        let batch = Tensor::zeros(&[1, 3, 16, 16]);
        assert!(matches!(
            forward(&model, &batch, false, &mut Rng::new(0)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn head_only_selector_yields_head_gradients() {
        let cfg = tiny();
        let model = ViTModel::init(&cfg, &mut Rng::new(1)).unwrap();
        let out = forward(&model, &random_batch(&cfg, 2, 3), true, &mut Rng::new(4)).unwrap();
        let ce = cross_entropy(&out.logits, &[1, 5]).unwrap();
        let g = backward(&model, &out.cache, &ce.dlogits, Trainable::HeadOnly).unwrap();
        assert_eq!(g.names().collect::<Vec<_>>(), vec!["head.weight", "head.bias"]);
        let full = backward(&model, &out.cache, &ce.dlogits, Trainable::Full).unwrap();
        assert_eq!(full.len(), model.parameter_names().len());
        assert_eq!(full.get("head.weight"), g.get("head.weight"));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = tiny();
        let model = ViTModel::init(&cfg, &mut Rng::new(1)).unwrap();
        let out = forward(&model, &random_batch(&cfg, 2, 3), true, &mut Rng::new(4)).unwrap();
        let g = backward(&model, &out.cache, &Tensor::zeros(&[2, 9]), Trainable::Full).unwrap();
        assert!(g.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let cfg = tiny();
        let mut model = ViTModel::init(&cfg, &mut Rng::new(1)).unwrap();
        let out = forward(&model, &random_batch(&cfg, 2, 3), true, &mut Rng::new(4)).unwrap();
        model.parameter_mut("head.bias").unwrap().data_mut()[0] = 1.0;
        let err = backward(&model, &out.cache, &Tensor::zeros(&[2, 9]), Trainable::Full).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));

        let out = forward(&model, &random_batch(&cfg, 2, 3), true, &mut Rng::new(4)).unwrap();
        let err = backward(&model, &out.cache, &Tensor::zeros(&[3, 9]), Trainable::Full).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = tiny();
        let model = ViTModel::init(&cfg, &mut Rng::new(8)).unwrap();
        let out = forward(&model, &random_batch(&cfg, 2, 9), false, &mut Rng::new(0)).unwrap();
        let t = cfg.seq_len();
        for s in 0..2 {
            for l in 0..cfg.num_layers {
                for row in out.cache.attention(s, l).chunks_exact(t) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    /// Finite differences with dropout active: each evaluation replays the same
    /// masks by reseeding the generator.
    #[test]
    fn gradients_with_dropout_match_central_differences() {
        let cfg = ViTConfig {
            dropout_hidden: 0.2,
            dropout_attention: 0.2,
            num_layers: 1,
            ..tiny()
        };
        let mut model = ViTModel::init(&cfg, &mut Rng::new(21)).unwrap();
        let batch = random_batch(&cfg, 2, 22);
        let labels = [3usize, 7];
        let loss = |m: &ViTModel| {
            let out = forward(m, &batch, true, &mut Rng::new(77)).unwrap();
            cross_entropy(&out.logits, &labels).unwrap().loss
        };
        let out = forward(&model, &batch, true, &mut Rng::new(77)).unwrap();
        let ce = cross_entropy(&out.logits, &labels).unwrap();
        let grads = backward(&model, &out.cache, &ce.dlogits, Trainable::Full).unwrap();
        let h = 1e-5;
        for name in [
            "blocks.0.attn.q.weight",
            "blocks.0.mlp.fc1.weight",
            "pos_embed",
            "patch_embed.weight",
        ] {
            let analytic = grads.get(name).unwrap().clone();
            for idx in (0..analytic.len()).step_by(7) {
                let orig = model.parameter(name).unwrap().data()[idx];
                model.parameter_mut(name).unwrap().data_mut()[idx] = orig + h;
                let up = loss(&model);
                model.parameter_mut(name).unwrap().data_mut()[idx] = orig - h;
                let down = loss(&model);
                model.parameter_mut(name).unwrap().data_mut()[idx] = orig;
                let num = (up - down) / (2.0 * h);
                let a = analytic.data()[idx];
                assert!((num - a).abs() <= 1e-6 * (1.0 + a.abs()), "{name}[{idx}]: {a} vs {num}");
            }
        }
    }
}
