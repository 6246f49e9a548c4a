//! Forward pass of the dual-branch network.
//!
//! ```text
//! patch [B,d,s,s]
//!   └─ stem: conv3d → bn → relu → conv2d → bn → relu          [B,z,s,s]
//!        ├─ tokens + positional embedding → encoder → mean     [B,z]  (Transformer)
//!        └─ conv3×3 → bn → relu → conv1×1 → bn → relu → conv1×1
//!           + residual → relu → spatial mean                   [B,z]  (CNN)
//!   heads: Transformer [z→n], CNN [z→n], fused concat [2z→n]
//! ```

use super::config::{Head, ModelConfig, BN_EPS, LN_EPS};
use super::params::{head_name, BnBuffers, ModelParams, ParamVars};
use crate::autodiff::{NormMode, Tape, Var};
use crate::error::{Error, Result};

/// Logits of whichever heads the ablation case trains, each `[B, n]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModelOutput {
    pub logits_transformer: Option<Var>,
    pub logits_cnn: Option<Var>,
    pub logits_fused: Option<Var>,
}

impl ModelOutput {
    pub fn get(&self, head: Head) -> Option<Var> {
        match head {
            Head::Transformer => self.logits_transformer,
            Head::Cnn => self.logits_cnn,
            Head::Fused => self.logits_fused,
        }
    }

    pub fn present(&self) -> Vec<(Head, Var)> {
        [Head::Transformer, Head::Cnn, Head::Fused]
            .into_iter()
            .filter_map(|h| self.get(h).map(|v| (h, v)))
            .collect()
    }
}

fn stats<'a>(buffers: &'a mut BnBuffers, name: &str) -> Result<&'a mut crate::autodiff::BatchNormStats> {
    buffers
        .get_mut(name)
        .ok_or_else(|| Error::Config(format!("missing running statistics `{name}`")))
}

#[allow(clippy::too_many_arguments)]
fn conv_bn_relu(
    tape: &mut Tape,
    p: &ParamVars,
    buffers: &mut BnBuffers,
    x: Var,
    conv: &str,
    bn: &str,
    pad: usize,
    mode: NormMode,
) -> Result<Var> {
    let w = p.get(&format!("{conv}.weight"))?;
    let b = p.get(&format!("{conv}.bias"))?;
    let y = tape.conv2d(x, w, b, [pad, pad])?;
    let g = p.get(&format!("{bn}.gamma"))?;
    let beta = p.get(&format!("{bn}.beta"))?;
    let y = tape.batchnorm(y, 1, g, beta, BN_EPS, mode, stats(buffers, bn)?)?;
    tape.relu(y)
}

/// Spectral-spatial stem: `[B, d, s, s]` patches to `[B, z, s, s]` maps.
///
/// The full stem is a valid-in-spectrum 3-D convolution followed by batch
/// norm and ReLU, a reshape that stacks filters × remaining bands into
/// channels, then a padded 3×3 2-D convolution with batch norm and ReLU.
/// Ablation cases drop stages; a missing 2-D stage is replaced by a 1×1
/// linear projection to `z` channels.
pub fn ssfe_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &ParamVars,
    buffers: &mut BnBuffers,
    patch: Var,
    mode: NormMode,
) -> Result<Var> {
    let ab = cfg.ablation();
    let s = cfg.patch_size;
    let shape = tape.shape(patch).to_vec();
    if shape.len() != 4 || shape[1] != cfg.bands || shape[2] != s || shape[3] != s {
        return Err(Error::shape(
            "ssfe_forward",
            format!(
                "patch batch {shape:?}, expected [B, {}, {s}, {s}]",
                cfg.bands
            ),
        ));
    }
    let batch = shape[0];
    let mut x = patch;
    if ab.conv3d {
        let [kd, kh, kw] = cfg.ssfe_3d_kernel;
        if cfg.bands < kd {
            return Err(Error::shape(
                "ssfe_forward",
                format!("{} bands < spectral kernel extent {kd}", cfg.bands),
            ));
        }
        x = tape.reshape(x, &[batch, 1, cfg.bands, s, s])?;
        let w = p.get("ssfe.conv3d.weight")?;
        let b = p.get("ssfe.conv3d.bias")?;
        x = tape.conv3d(x, w, b, [0, kh / 2, kw / 2])?;
        let g = p.get("ssfe.bn3d.gamma")?;
        let beta = p.get("ssfe.bn3d.beta")?;
        x = tape.batchnorm(x, 1, g, beta, BN_EPS, mode, stats(buffers, "ssfe.bn3d")?)?;
        x = tape.relu(x)?;
        x = tape.reshape(x, &[batch, cfg.stem_channels(), s, s])?;
    }
    if ab.conv2d {
        conv_bn_relu(tape, p, buffers, x, "ssfe.conv2d", "ssfe.bn2d", 1, mode)
    } else {
        let w = p.get("stem.proj.weight")?;
        let b = p.get("stem.proj.bias")?;
        tape.conv2d(x, w, b, [0, 0])
    }
}

/// Flattens `[B, z, s, s]` maps into `N = s²` row-major tokens, projects
/// them linearly and adds the learned positional embedding.
pub fn tokenize(tape: &mut Tape, cfg: &ModelConfig, p: &ParamVars, fmap: Var) -> Result<Var> {
    let shape = tape.shape(fmap).to_vec();
    let n = cfg.tokens();
    if shape.len() != 4 || shape[1] != cfg.embed_dim || shape[2] * shape[3] != n {
        return Err(Error::shape("tokenize", format!("feature map {shape:?}")));
    }
    let flat = tape.reshape(fmap, &[shape[0], cfg.embed_dim, n])?;
    let tokens = tape.permute(flat, &[0, 2, 1])?;
    let proj = tape.linear(tokens, p.get("tokens.proj.weight")?, p.get("tokens.proj.bias")?)?;
    tape.add(proj, p.get("tokens.pos")?)
}

/// Multi-head scaled dot-product self-attention of layer `prefix`.
/// Returns the projected output `[B, N, z]` and the attention weights
/// `[B·h, N, N]`.
pub fn mhsa_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &ParamVars,
    prefix: &str,
    tokens: Var,
) -> Result<(Var, Var)> {
    let shape = tape.shape(tokens).to_vec();
    let z = cfg.embed_dim;
    if shape.len() != 3 || shape[2] != z {
        return Err(Error::shape("mhsa", format!("tokens {shape:?}, width {z}")));
    }
    if cfg.heads == 0 || !z.is_multiple_of(cfg.heads) {
        return Err(Error::shape("mhsa", format!("{z} channels over {} heads", cfg.heads)));
    }
    let (b, n, h, dk) = (shape[0], shape[1], cfg.heads, z / cfg.heads);
    let split = |tape: &mut Tape, which: &str| -> Result<Var> {
        let w = p.get(&format!("{prefix}.attn.{which}.weight"))?;
        let bias = p.get(&format!("{prefix}.attn.{which}.bias"))?;
        let y = tape.linear(tokens, w, bias)?;
        let y = tape.reshape(y, &[b, n, h, dk])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        tape.reshape(y, &[b * h, n, dk])
    };
    let q = split(tape, "q")?;
    let k = split(tape, "k")?;
    let v = split(tape, "v")?;
    let kt = tape.transpose(k, 1, 2)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let attn = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(attn, v)?;
    let ctx = tape.reshape(ctx, &[b, h, n, dk])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, n, z])?;
    let out = tape.linear(
        ctx,
        p.get(&format!("{prefix}.attn.out.weight"))?,
        p.get(&format!("{prefix}.attn.out.bias"))?,
    )?;
    Ok((out, attn))
}

/// Pre-norm encoder layers followed by a mean over tokens: `[B, N, z]` to `[B, z]`.
pub fn transformer_branch(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &ParamVars,
    tokens: Var,
) -> Result<Var> {
    let mut x = tokens;
    for l in 0..cfg.encoder_layers {
        let e = format!("encoder.{l}");
        let h = tape.layernorm(
            x,
            p.get(&format!("{e}.ln1.gamma"))?,
            p.get(&format!("{e}.ln1.beta"))?,
            LN_EPS,
        )?;
        let (attn, _) = mhsa_forward(tape, cfg, p, &e, h)?;
        x = tape.add(x, attn)?;
        let h = tape.layernorm(
            x,
            p.get(&format!("{e}.ln2.gamma"))?,
            p.get(&format!("{e}.ln2.beta"))?,
            LN_EPS,
        )?;
        let h = tape.linear(
            h,
            p.get(&format!("{e}.mlp.fc1.weight"))?,
            p.get(&format!("{e}.mlp.fc1.bias"))?,
        )?;
        let h = tape.relu(h)?;
        let h = tape.linear(
            h,
            p.get(&format!("{e}.mlp.fc2.weight"))?,
            p.get(&format!("{e}.mlp.fc2.bias"))?,
        )?;
        x = tape.add(x, h)?;
    }
    tape.mean_over_axis(x, 1)
}

/// Local residual block and global average pool: `[B, z, s, s]` to `[B, z]`.
pub fn cnn_branch(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &ParamVars,
    buffers: &mut BnBuffers,
    fmap: Var,
    mode: NormMode,
) -> Result<Var> {
    let shape = tape.shape(fmap).to_vec();
    if shape.len() != 4 || shape[1] != cfg.embed_dim {
        return Err(Error::shape("cnn_branch", format!("feature map {shape:?}")));
    }
    let y = conv_bn_relu(tape, p, buffers, fmap, "cnn.conv1", "cnn.bn1", 1, mode)?;
    let y = conv_bn_relu(tape, p, buffers, y, "cnn.conv2", "cnn.bn2", 0, mode)?;
    let y = tape.conv2d(y, p.get("cnn.conv3.weight")?, p.get("cnn.conv3.bias")?, [0, 0])?;
    let y = tape.add(y, fmap)?;
    let y = tape.relu(y)?;
    let y = tape.reshape(y, &[shape[0], shape[1], shape[2] * shape[3]])?;
    tape.mean_over_axis(y, 2)
}

fn head(tape: &mut Tape, p: &ParamVars, which: Head, feat: Var) -> Result<Var> {
    let name = head_name(which);
    tape.linear(
        feat,
        p.get(&format!("{name}.weight"))?,
        p.get(&format!("{name}.bias"))?,
    )
}

/// Full forward pass over a `[B, d, s, s]` patch batch.
///
/// `buffers` holds the running batch-norm statistics; they are updated in
/// [`NormMode::Train`] when the batch has more than one sample.
pub fn forward_with(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &ParamVars,
    buffers: &mut BnBuffers,
    patch: Var,
    mode: NormMode,
) -> Result<ModelOutput> {
    let ab = cfg.ablation();
    let fmap = ssfe_forward(tape, cfg, p, buffers, patch, mode)?;
    let tokens = tokenize(tape, cfg, p, fmap)?;
    let feat_t = transformer_branch(tape, cfg, p, tokens)?;
    if !ab.cnn_branch {
        return Ok(ModelOutput {
            logits_transformer: Some(head(tape, p, Head::Transformer, feat_t)?),
            ..Default::default()
        });
    }
    let feat_c = cnn_branch(tape, cfg, p, buffers, fmap, mode)?;
    let fused = tape.concat(&[feat_t, feat_c], 1)?;
    let mut out = ModelOutput {
        logits_fused: Some(head(tape, p, Head::Fused, fused)?),
        ..Default::default()
    };
    if ab.multi_output {
        out.logits_transformer = Some(head(tape, p, Head::Transformer, feat_t)?);
        out.logits_cnn = Some(head(tape, p, Head::Cnn, feat_c)?);
    }
    Ok(out)
}

/// Binds `params` on `tape` and runs [`forward_with`].
pub fn forward(
    tape: &mut Tape,
    params: &mut ModelParams,
    patch: Var,
    mode: NormMode,
) -> Result<(ModelOutput, ParamVars)> {
    let vars = params.bind(tape);
    let cfg = params.config().clone();
    let out = forward_with(tape, &cfg, &vars, params.buffers_mut(), patch, mode)?;
    Ok((out, vars))
}

/// Sum of the cross-entropy of every present head, with equal weights.
pub fn combined_loss(tape: &mut Tape, out: &ModelOutput, labels: &[usize]) -> Result<Var> {
    let heads = out.present();
    let Some(((_, first), rest)) = heads.split_first() else {
        return Err(Error::InvalidArgument("model output has no heads".into()));
    };
    let mut total = tape.cross_entropy(*first, labels)?;
    for &(_, logits) in rest {
        let ce = tape.cross_entropy(logits, labels)?;
        total = tape.add(total, ce)?;
    }
    Ok(total)
}

/// Argmax of the fused head when present, otherwise of the sole head.
/// Ties go to the lowest class index.
pub fn predict(tape: &Tape, out: &ModelOutput) -> Result<Vec<usize>> {
    let logits = match (out.logits_fused, out.present().as_slice()) {
        (Some(f), _) => f,
        (None, [(_, only)]) => *only,
        (None, []) => return Err(Error::InvalidArgument("model output has no heads".into())),
        (None, _) => {
            return Err(Error::InvalidArgument(
                "several heads but no fused head to predict from".into(),
            ))
        }
    };
    let t = tape.value(logits);
    let classes = t.shape()[1];
    Ok(t.data().chunks(classes).map(argmax).collect())
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
