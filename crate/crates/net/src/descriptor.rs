//! Architecture descriptor and the tensor layout it implies.

use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};

pub const ARCHITECTURE: &str = "cdpa-unet";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Predicts the noise `ε̂` from a noisy slice and the timestep.
    NoisePrediction,
    /// Maps an analytic reconstruction straight to a clean slice.
    Denoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionKind {
    Timestep,
    SliceIndex,
    NumViews,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Descriptor {
    pub architecture: String,
    pub mode: Mode,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Feature widths per resolution level; one stride-2 downsample between levels.
    pub channels: Vec<usize>,
    /// Channels per normalization group.
    pub group_size: usize,
    /// Length of each sinusoidal condition embedding.
    pub embed_dim: usize,
    pub max_period: f64,
    /// Order of the embedded conditions in the context and the embedding vector.
    pub conditions: Vec<ConditionKind>,
    /// Nominal training resolution; inference accepts any divisible size.
    #[serde(default)]
    pub image_size: Option<usize>,
    /// Physical intensity that maps to 1 in the network's normalized units.
    #[serde(default = "unit")]
    pub data_scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl Descriptor {
    /// The reference configuration: 64×64 input, widths (32, 64, 128), groups of 8.
    pub fn reference(mode: Mode) -> Self {
        Self::with_channels(mode, vec![32, 64, 128], 8, 32, Some(64))
    }

    pub fn with_channels(
        mode: Mode,
        channels: Vec<usize>,
        group_size: usize,
        embed_dim: usize,
        image_size: Option<usize>,
    ) -> Self {
        let (in_channels, conditions) = match mode {
            Mode::NoisePrediction => (
                2,
                vec![ConditionKind::Timestep, ConditionKind::SliceIndex, ConditionKind::NumViews],
            ),
            Mode::Denoise => (1, vec![ConditionKind::SliceIndex, ConditionKind::NumViews]),
        };
        Self {
            architecture: ARCHITECTURE.into(),
            mode,
            in_channels,
            out_channels: 1,
            channels,
            group_size,
            embed_dim,
            max_period: 10_000.0,
            conditions,
            image_size,
            data_scale: 1.0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(text).map_err(|e| NetError::BadDescriptor(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("descriptor serializes")
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    /// Width of the shared embedding vector fed to every residual block.
    pub fn time_dim(&self) -> usize {
        4 * self.channels[0]
    }

    /// Input side lengths must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::BadDescriptor(m));
        if self.architecture != ARCHITECTURE {
            return bad(format!("unknown architecture `{}`", self.architecture));
        }
        if self.channels.is_empty() || self.channels.len() > 6 {
            return bad("channels must list 1 to 6 levels".into());
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.group_size == 0 {
            return bad("group_size must be positive".into());
        }
        for (name, c) in self.norm_widths() {
            if c == 0 || c % self.group_size != 0 {
                return bad(format!("{name} width {c} is not a multiple of group_size {}", self.group_size));
            }
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return bad(format!("embed_dim must be even and at least 2, got {}", self.embed_dim));
        }
        if !(self.max_period.is_finite() && self.max_period > 1.0) {
            return bad("max_period must exceed 1".into());
        }
        if !(self.data_scale.is_finite() && self.data_scale > 0.0) {
            return bad("data_scale must be positive".into());
        }
        if self.conditions.is_empty() {
            return bad("at least one condition is required".into());
        }
        for (i, c) in self.conditions.iter().enumerate() {
            if self.conditions[..i].contains(c) {
                return bad(format!("condition {c:?} listed twice"));
            }
        }
        let has_t = self.conditions.contains(&ConditionKind::Timestep);
        match self.mode {
            Mode::NoisePrediction if !has_t => bad("noise-prediction mode needs a timestep condition".into()),
            Mode::Denoise if has_t => bad("denoise mode takes no timestep".into()),
            _ => Ok(()),
        }?;
        if let Some(s) = self.image_size {
            if s == 0 || s % self.size_multiple() != 0 {
                return bad(format!("image_size {s} is not a multiple of {}", self.size_multiple()));
            }
        }
        Ok(())
    }

    fn norm_widths(&self) -> Vec<(String, usize)> {
        let c = &self.channels;
        let l = c.len();
        let mut v: Vec<(String, usize)> = c.iter().enumerate().map(|(i, &w)| (format!("level {i}"), w)).collect();
        for i in 0..l {
            let below = if i + 1 == l { c[l - 1] } else { c[i + 1] };
            v.push((format!("up.{i} input"), below + c[i]));
        }
        v
    }

    /// Every tensor the network reads, with its shape, in canonical order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.channels;
        let l = c.len();
        let td = self.time_dim();
        let e = self.embed_dim;
        let mut out = Vec::new();
        let lin = |out: &mut Vec<(String, Vec<usize>)>, p: &str, o: usize, i: usize| {
            out.push((format!("{p}.weight"), vec![o, i]));
            out.push((format!("{p}.bias"), vec![o]));
        };
        lin(&mut out, "emb.lin1", td, self.conditions.len() * e);
        lin(&mut out, "emb.lin2", td, td);
        conv(&mut out, "conv_in", c[0], self.in_channels, 3);
        for i in 0..l {
            let cin = if i == 0 { c[0] } else { c[i - 1] };
            res_block(&mut out, &format!("down.{i}.res"), cin, c[i], td);
            if i + 1 < l {
                conv(&mut out, &format!("down.{i}.down"), c[i], c[i], 3);
            }
        }
        let cb = c[l - 1];
        res_block(&mut out, "mid.res1", cb, cb, td);
        norm(&mut out, "mid.attn.norm", cb);
        for p in ["q", "k", "v", "out"] {
            lin(&mut out, &format!("mid.attn.{p}"), cb, cb);
        }
        norm(&mut out, "mid.xattn.norm", cb);
        lin(&mut out, "mid.xattn.q", cb, cb);
        lin(&mut out, "mid.xattn.k", cb, e);
        lin(&mut out, "mid.xattn.v", cb, e);
        lin(&mut out, "mid.xattn.out", cb, cb);
        res_block(&mut out, "mid.res2", cb, cb, td);
        for i in (0..l).rev() {
            let below = if i + 1 == l { cb } else { c[i + 1] };
            res_block(&mut out, &format!("up.{i}.res"), below + c[i], c[i], td);
            if i > 0 {
                conv(&mut out, &format!("up.{i}.up"), c[i], c[i], 3);
            }
        }
        norm(&mut out, "norm_out", c[0]);
        conv(&mut out, "conv_out", self.out_channels, c[0], 3);
        out
    }
}

fn conv(out: &mut Vec<(String, Vec<usize>)>, p: &str, co: usize, ci: usize, k: usize) {
    out.push((format!("{p}.weight"), vec![co, ci, k, k]));
    out.push((format!("{p}.bias"), vec![co]));
}

fn norm(out: &mut Vec<(String, Vec<usize>)>, p: &str, c: usize) {
    out.push((format!("{p}.weight"), vec![c]));
    out.push((format!("{p}.bias"), vec![c]));
}

fn res_block(out: &mut Vec<(String, Vec<usize>)>, p: &str, cin: usize, cout: usize, td: usize) {
    norm(out, &format!("{p}.norm1"), cin);
    conv(out, &format!("{p}.conv1"), cout, cin, 3);
    out.push((format!("{p}.emb.weight"), vec![cout, td]));
    out.push((format!("{p}.emb.bias"), vec![cout]));
    norm(out, &format!("{p}.norm2"), cout);
    conv(out, &format!("{p}.conv2"), cout, cout, 3);
    if cin != cout {
        conv(out, &format!("{p}.skip"), cout, cin, 1);
    }
}
