use std::fmt;

use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// Which parts of the network a Table-V style ablation case enables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub case: u8,
    pub cnn_branch: bool,
    pub conv3d: bool,
    pub conv2d: bool,
    /// Separate losses on the Transformer, CNN and fused heads.
    pub multi_output: bool,
}

/// Module switches for ablation cases 1 through 5.
///
/// 1. Transformer branch on per-pixel linear projections of raw spectra.
/// 2. Adds the CNN branch and the fused head.
/// 3. Adds the 3-D convolution stage.
/// 4. Adds the 2-D convolution stage (full stem); loss on the fused head only.
/// 5. Full model with losses on all three heads.
pub fn ablation_config(case: u8) -> Result<Ablation> {
    let (cnn_branch, conv3d, conv2d, multi_output) = match case {
        1 => (false, false, false, false),
        2 => (true, false, false, false),
        3 => (true, true, false, false),
        4 => (true, true, true, false),
        5 => (true, true, true, true),
        _ => {
            return Err(Error::Config(format!("ablation case must be 1..=5, got {case}")));
        }
    };
    Ok(Ablation {
        case,
        cnn_branch,
        conv3d,
        conv2d,
        multi_output,
    })
}

/// The three classification heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Head {
    Transformer,
    Cnn,
    Fused,
}

impl Ablation {
    /// Heads that produce logits (and therefore carry a loss term).
    pub fn heads(&self) -> Vec<Head> {
        match (self.cnn_branch, self.multi_output) {
            (false, _) => vec![Head::Transformer],
            (true, false) => vec![Head::Fused],
            (true, true) => vec![Head::Transformer, Head::Cnn, Head::Fused],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Spatial side of the square input patch; odd.
    pub patch_size: usize,
    pub bands: usize,
    pub classes: usize,
    pub ssfe_3d_filters: usize,
    /// Spectral × height × width extent of the 3-D kernel.
    pub ssfe_3d_kernel: [usize; 3],
    /// Channel width of the stem output, tokens and both branches.
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub mlp_hidden: usize,
    pub case: u8,
}

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

impl ModelConfig {
    pub fn new(bands: usize, classes: usize) -> Self {
        ModelConfig {
            patch_size: 13,
            bands,
            classes,
            ssfe_3d_filters: 8,
            ssfe_3d_kernel: [7, 3, 3],
            embed_dim: 64,
            heads: 4,
            encoder_layers: 1,
            mlp_hidden: 128,
            case: 5,
        }
    }

    pub fn ablation(&self) -> Ablation {
        ablation_config(self.case).expect("validated config")
    }

    pub fn tokens(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Spectral extent left after the valid 3-D convolution.
    pub fn spectral_out(&self) -> usize {
        self.bands + 1 - self.ssfe_3d_kernel[0]
    }

    /// Channels entering the 2-D stage (or the 1×1 projection replacing it).
    pub fn stem_channels(&self) -> usize {
        if self.ablation().conv3d {
            self.ssfe_3d_filters * self.spectral_out()
        } else {
            self.bands
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ab = ablation_config(self.case)?;
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size < 3 || self.patch_size.is_multiple_of(2) {
            return fail(format!("patch size must be odd and >= 3, got {}", self.patch_size));
        }
        if self.bands == 0 || self.classes < 2 {
            return fail(format!(
                "need at least one band and two classes (bands {}, classes {})",
                self.bands, self.classes
            ));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.encoder_layers == 0 || self.mlp_hidden == 0 {
            return fail("encoder needs at least one layer and a non-empty MLP".into());
        }
        if ab.conv3d {
            let [kd, kh, kw] = self.ssfe_3d_kernel;
            if self.ssfe_3d_filters == 0 || kd == 0 {
                return fail("3-D stage needs filters and a spectral kernel extent".into());
            }
            if kh % 2 == 0 || kw % 2 == 0 {
                return fail(format!("3-D kernel spatial extents must be odd, got {kh}×{kw}"));
            }
            if self.bands < kd {
                return fail(format!(
                    "{} bands cannot feed a 3-D kernel of spectral extent {kd}",
                    self.bands
                ));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("patch_size", self.patch_size);
        kv.set("bands", self.bands);
        kv.set("classes", self.classes);
        kv.set("ssfe_3d_filters", self.ssfe_3d_filters);
        kv.set("ssfe_3d_kernel", format_kernel(self.ssfe_3d_kernel));
        kv.set("embed_dim", self.embed_dim);
        kv.set("heads", self.heads);
        kv.set("encoder_layers", self.encoder_layers);
        kv.set("mlp_hidden", self.mlp_hidden);
        kv.set("case", self.case);
    }

    /// Reads a config; `bands` and `classes` must be present, everything else
    /// falls back to the defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = ModelConfig::new(kv.parse_req("bands")?, kv.parse_req("classes")?);
        cfg.apply_kv(kv)?;
        Ok(cfg)
    }

    /// Overrides any architecture fields present in `kv`.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! take {
            ($key:literal, $field:ident) => {
                if let Some(v) = kv.parse_opt($key)? {
                    self.$field = v;
                }
            };
        }
        take!("patch_size", patch_size);
        take!("bands", bands);
        take!("classes", classes);
        take!("ssfe_3d_filters", ssfe_3d_filters);
        take!("embed_dim", embed_dim);
        take!("heads", heads);
        take!("encoder_layers", encoder_layers);
        take!("mlp_hidden", mlp_hidden);
        take!("case", case);
        if let Some(k) = kv.get("ssfe_3d_kernel") {
            self.ssfe_3d_kernel = parse_kernel(k)
                .ok_or_else(|| Error::Config(format!("bad 3-D kernel `{k}`, expected DxHxW")))?;
        }
        Ok(())
    }
}

pub fn format_kernel(k: [usize; 3]) -> String {
    format!("{}x{}x{}", k[0], k[1], k[2])
}

pub fn parse_kernel(s: &str) -> Option<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(['x', 'X', '×'])
        .map(|p| p.trim().parse().ok())
        .collect::<Option<_>>()?;
    parts.try_into().ok()
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "case {} | s={} d={} n={} | 3-D {}×{} | z={} heads={} layers={} mlp={}",
            self.case,
            self.patch_size,
            self.bands,
            self.classes,
            self.ssfe_3d_filters,
            format_kernel(self.ssfe_3d_kernel),
            self.embed_dim,
            self.heads,
            self.encoder_layers,
            self.mlp_hidden
        )
    }
}
