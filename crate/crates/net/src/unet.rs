//! Conditional U-Net forward pass.

use std::path::Path;

use crate::descriptor::{ConditionKind, Descriptor, Mode};
use crate::embed::sinusoidal_embed;
use crate::error::{NetError, Result};
use crate::format::{Container, Tensor};
use crate::layers::{self, FeatureMap};

/// Per-slice conditioning inputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConditionBundle<'a> {
    /// Analytic reconstruction concatenated as the second input channel.
    pub fdk_slice: Option<&'a [f32]>,
    pub slice_index: usize,
    pub num_views: usize,
    /// Diffusion step; noise-prediction mode only.
    pub timestep: Option<usize>,
}

/// Validated, immutable network weights.
#[derive(Clone, Debug)]
pub struct UNet {
    desc: Descriptor,
    weights: Container,
}

/// Intermediate activations recorded during a traced forward pass.
pub type Taps = Vec<(String, FeatureMap)>;

impl UNet {
    /// Checks every tensor against the descriptor's layout.
    pub fn from_container(weights: Container) -> Result<Self> {
        let desc = Descriptor::from_json(weights.descriptor())?;
        let layout = desc.tensor_layout();
        for (name, dims) in &layout {
            let t = weights.require(name)?;
            if t.dims() != dims.as_slice() {
                return Err(NetError::ShapeMismatch { name: name.clone(), expected: dims.clone(), found: t.dims().to_vec() });
            }
        }
        if weights.len() != layout.len() {
            for (name, _) in weights.iter() {
                if !layout.iter().any(|(n, _)| n == name) {
                    return Err(NetError::UnexpectedTensor(name.to_string()));
                }
            }
        }
        Ok(Self { desc, weights })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    /// Builds weights with every tensor produced by `fill(name, dims)`.
    pub fn from_fn(desc: &Descriptor, mut fill: impl FnMut(&str, &[usize]) -> Vec<f32>) -> Result<Self> {
        desc.validate()?;
        let mut c = Container::new(desc.to_json());
        for (name, dims) in desc.tensor_layout() {
            let data = fill(&name, &dims);
            c.insert(name, Tensor::new(dims, data)?)?;
        }
        Self::from_container(c)
    }

    pub fn descriptor(&self) -> &Descriptor {
        &self.desc
    }

    pub fn weights(&self) -> &Container {
        &self.weights
    }

    pub fn into_weights(self) -> Container {
        self.weights
    }

    fn w(&self, name: &str) -> &Tensor {
        self.weights.get(name).expect("layout validated at load")
    }

    fn condition_values(&self, cond: &ConditionBundle) -> Result<Vec<i64>> {
        if cond.num_views == 0 {
            return Err(NetError::invalid("conditions", "num_views must be at least 1"));
        }
        if self.desc.mode == Mode::Denoise && cond.timestep.is_some() {
            return Err(NetError::invalid("conditions", "denoise mode takes no timestep"));
        }
        self.desc
            .conditions
            .iter()
            .map(|k| match k {
                ConditionKind::Timestep => cond
                    .timestep
                    .map(|t| t as i64)
                    .ok_or_else(|| NetError::invalid("conditions", "noise-prediction mode needs a timestep")),
                ConditionKind::SliceIndex => Ok(cond.slice_index as i64),
                ConditionKind::NumViews => Ok(cond.num_views as i64),
            })
            .collect()
    }

    /// Context tokens (one sinusoid per condition) and the activated embedding vector.
    fn embeddings(&self, cond: &ConditionBundle) -> Result<(Vec<f32>, Vec<f32>)> {
        let e = self.desc.embed_dim;
        let mut ctx = Vec::with_capacity(e * self.desc.conditions.len());
        for v in self.condition_values(cond)? {
            ctx.extend(sinusoidal_embed(v, e, self.desc.max_period)?);
        }
        let mut h = layers::linear(&ctx, 1, self.w("emb.lin1.weight"), self.w("emb.lin1.bias"), "emb.lin1")?;
        layers::silu_inplace(&mut h);
        let mut emb = layers::linear(&h, 1, self.w("emb.lin2.weight"), self.w("emb.lin2.bias"), "emb.lin2")?;
        layers::silu_inplace(&mut emb);
        Ok((ctx, emb))
    }

    fn conv(&self, p: &str, x: &FeatureMap, stride: usize) -> Result<FeatureMap> {
        layers::conv2d(x, self.w(&format!("{p}.weight")), self.w(&format!("{p}.bias")), stride, p)
    }

    fn norm(&self, p: &str, x: &FeatureMap) -> Result<FeatureMap> {
        layers::group_norm(x, self.desc.group_size, self.w(&format!("{p}.weight")), self.w(&format!("{p}.bias")), p)
    }

    fn res_block(&self, p: &str, x: &FeatureMap, emb: &[f32]) -> Result<FeatureMap> {
        let mut h = self.norm(&format!("{p}.norm1"), x)?;
        layers::silu_inplace(&mut h.data);
        let mut h = self.conv(&format!("{p}.conv1"), &h, 1)?;
        let shift = layers::linear(emb, 1, self.w(&format!("{p}.emb.weight")), self.w(&format!("{p}.emb.bias")), p)?;
        let plane = h.plane();
        for (c, s) in shift.iter().enumerate() {
            for v in &mut h.data[c * plane..(c + 1) * plane] {
                *v += s;
            }
        }
        let mut h = self.norm(&format!("{p}.norm2"), &h)?;
        layers::silu_inplace(&mut h.data);
        let mut h = self.conv(&format!("{p}.conv2"), &h, 1)?;
        let skip_name = format!("{p}.skip");
        if self.weights.get(&format!("{skip_name}.weight")).is_some() {
            h.add_assign(&self.conv(&skip_name, x, 1)?, p)?;
        } else {
            h.add_assign(x, p)?;
        }
        Ok(h)
    }

    fn attention_block(&self, p: &str, x: &FeatureMap, context: Option<&[f32]>) -> Result<FeatureMap> {
        let c = x.channels;
        let n = x.plane();
        let tokens = layers::to_tokens(&self.norm(&format!("{p}.norm"), x)?);
        let lin = |name: &str, input: &[f32], rows: usize| {
            layers::linear(input, rows, self.w(&format!("{p}.{name}.weight")), self.w(&format!("{p}.{name}.bias")), p)
        };
        let q = lin("q", &tokens, n)?;
        let (k, v, m) = match context {
            Some(ctx) => {
                let m = ctx.len() / self.desc.embed_dim;
                (lin("k", ctx, m)?, lin("v", ctx, m)?, m)
            }
            None => (lin("k", &tokens, n)?, lin("v", &tokens, n)?, n),
        };
        let o = layers::attention(&q, &k, &v, n, m, c);
        let o = lin("out", &o, n)?;
        let mut out = x.clone();
        out.add_assign(&layers::from_tokens(&o, c, x.height, x.width), p)?;
        Ok(out)
    }

    /// Full forward pass on an `in_channels`-channel input.
    pub fn forward_map(&self, x: &FeatureMap, cond: &ConditionBundle) -> Result<FeatureMap> {
        self.run(x, cond, None)
    }

    /// Forward pass that also records block outputs under
    /// `conv_in`, `down.{i}`, `mid` and `up.{i}`.
    pub fn forward_traced(&self, x: &FeatureMap, cond: &ConditionBundle) -> Result<(FeatureMap, Taps)> {
        let mut taps = Vec::new();
        let out = self.run(x, cond, Some(&mut taps))?;
        Ok((out, taps))
    }

    fn run(&self, x: &FeatureMap, cond: &ConditionBundle, mut taps: Option<&mut Taps>) -> Result<FeatureMap> {
        let d = &self.desc;
        if x.channels != d.in_channels {
            return Err(NetError::invalid("conv_in", format!("expects {} input channels, got {}", d.in_channels, x.channels)));
        }
        let m = d.size_multiple();
        if x.height == 0 || x.width == 0 || x.height % m != 0 || x.width % m != 0 {
            return Err(NetError::invalid(
                "input",
                format!("spatial size {}×{} is not a positive multiple of {m}", x.height, x.width),
            ));
        }
        let mut tap = |name: String, f: &FeatureMap| {
            if let Some(t) = taps.as_deref_mut() {
                t.push((name, f.clone()));
            }
        };
        let (ctx, emb) = self.embeddings(cond)?;
        let levels = d.depth();
        let mut h = self.conv("conv_in", x, 1)?;
        tap("conv_in".into(), &h);
        let mut skips = Vec::with_capacity(levels);
        for i in 0..levels {
            h = self.res_block(&format!("down.{i}.res"), &h, &emb)?;
            tap(format!("down.{i}"), &h);
            skips.push(h.clone());
            if i + 1 < levels {
                h = self.conv(&format!("down.{i}.down"), &h, 2)?;
            }
        }
        h = self.res_block("mid.res1", &h, &emb)?;
        h = self.attention_block("mid.attn", &h, None)?;
        h = self.attention_block("mid.xattn", &h, Some(&ctx))?;
        h = self.res_block("mid.res2", &h, &emb)?;
        tap("mid".into(), &h);
        for i in (0..levels).rev() {
            let name = format!("up.{i}");
            h = h.concat(&skips[i], &name)?;
            h = self.res_block(&format!("{name}.res"), &h, &emb)?;
            tap(name.clone(), &h);
            if i > 0 {
                h = self.conv(&format!("{name}.up"), &layers::upsample_nearest2(&h), 1)?;
            }
        }
        let mut h = self.norm("norm_out", &h)?;
        layers::silu_inplace(&mut h.data);
        self.conv("conv_out", &h, 1)
    }

    /// Single-slice inference. `input` fills channel 0; a second input channel
    /// holds `cond.fdk_slice`, or zeros when it is absent. Returns channel 0.
    pub fn forward(&self, input: &[f32], shape: [usize; 2], cond: &ConditionBundle) -> Result<Vec<f32>> {
        let [h, w] = shape;
        let plane = h * w;
        if input.len() != plane {
            return Err(NetError::invalid("input", format!("{} values for a {h}×{w} slice", input.len())));
        }
        let mut data = Vec::with_capacity(plane * self.desc.in_channels);
        data.extend_from_slice(input);
        for extra in 1..self.desc.in_channels {
            match cond.fdk_slice {
                Some(f) if extra == 1 => {
                    if f.len() != plane {
                        return Err(NetError::invalid("fdk condition", format!("{} values for a {h}×{w} slice", f.len())));
                    }
                    data.extend_from_slice(f);
                }
                _ => data.resize(data.len() + plane, 0.0),
            }
        }
        let x = FeatureMap::new(self.desc.in_channels, h, w, data)?;
        let mut out = self.forward_map(&x, cond)?;
        out.data.truncate(plane);
        Ok(out.data)
    }
}
