//! Parity fixtures: a fixed input, its conditions and the reference outputs
//! of an independent implementation, stored in the tensor container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::format::{Container, Tensor};
use crate::layers::FeatureMap;
use crate::unet::{ConditionBundle, UNet};

pub const FIXTURE_KIND: &str = "unet-parity";
const ACTIVATION_PREFIX: &str = "activation.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FixtureHeader {
    kind: String,
    #[serde(default)]
    note: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParityFixture {
    pub input: FeatureMap,
    pub expected_output: FeatureMap,
    pub timestep: Option<usize>,
    pub slice_index: usize,
    pub num_views: usize,
    /// Reference block outputs keyed by tap name (see [`UNet::forward_traced`]).
    pub activations: Vec<(String, FeatureMap)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParityReport {
    pub output_max_abs: f32,
    pub activation_max_abs: Vec<(String, f32)>,
}

impl ParityReport {
    pub fn worst(&self) -> f32 {
        self.activation_max_abs.iter().map(|(_, e)| *e).fold(self.output_max_abs, f32::max)
    }
}

fn map_from(name: &str, t: &Tensor) -> Result<FeatureMap> {
    match t.dims() {
        &[c, h, w] => FeatureMap::new(c, h, w, t.data().to_vec()),
        d => Err(NetError::ShapeMismatch { name: name.into(), expected: vec![0, 0, 0], found: d.to_vec() }),
    }
}

fn map_tensor(f: &FeatureMap) -> Tensor {
    Tensor::new(vec![f.channels, f.height, f.width], f.data.clone()).expect("feature map is consistent")
}

fn count(c: &Container, name: &str) -> Result<usize> {
    let t = c.require(name)?;
    if t.dims() != [1] {
        return Err(NetError::ShapeMismatch { name: name.into(), expected: vec![1], found: t.dims().to_vec() });
    }
    let v = t.data()[0];
    if v < 0.0 || v.fract() != 0.0 || v > 16_777_216.0 {
        return Err(NetError::invalid(name, format!("{v} is not a non-negative integer")));
    }
    Ok(v as usize)
}

impl ParityFixture {
    pub fn condition(&self) -> ConditionBundle<'_> {
        ConditionBundle { fdk_slice: None, slice_index: self.slice_index, num_views: self.num_views, timestep: self.timestep }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let header: FixtureHeader =
            serde_json::from_str(c.descriptor()).map_err(|e| NetError::BadDescriptor(e.to_string()))?;
        if header.kind != FIXTURE_KIND {
            return Err(NetError::BadDescriptor(format!("`{}` is not a parity fixture", header.kind)));
        }
        let input = map_from("input", c.require("input")?)?;
        let expected_output = map_from("expected_output", c.require("expected_output")?)?;
        let timestep = match c.get("timestep") {
            Some(_) => Some(count(c, "timestep")?),
            None => None,
        };
        let mut activations = Vec::new();
        for (name, t) in c.iter() {
            if let Some(tap) = name.strip_prefix(ACTIVATION_PREFIX) {
                activations.push((tap.to_string(), map_from(name, t)?));
            } else if !["input", "expected_output", "timestep", "slice_index", "num_views"].contains(&name) {
                return Err(NetError::UnexpectedTensor(name.to_string()));
            }
        }
        Ok(Self {
            input,
            expected_output,
            timestep,
            slice_index: count(c, "slice_index")?,
            num_views: count(c, "num_views")?,
            activations,
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let header = FixtureHeader { kind: FIXTURE_KIND.into(), note: String::new() };
        let mut c = Container::new(serde_json::to_string(&header).expect("header serializes"));
        c.insert("input", map_tensor(&self.input))?;
        c.insert("expected_output", map_tensor(&self.expected_output))?;
        if let Some(t) = self.timestep {
            c.insert("timestep", Tensor::scalar(t as f32))?;
        }
        c.insert("slice_index", Tensor::scalar(self.slice_index as f32))?;
        c.insert("num_views", Tensor::scalar(self.num_views as f32))?;
        for (name, a) in &self.activations {
            c.insert(format!("{ACTIVATION_PREFIX}{name}"), map_tensor(a))?;
        }
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    /// Runs `net` on the fixture input and measures max-abs deviations.
    pub fn check(&self, net: &UNet) -> Result<ParityReport> {
        let (out, taps) = net.forward_traced(&self.input, &self.condition())?;
        let output_max_abs = max_abs("expected_output", &out, &self.expected_output)?;
        let mut activation_max_abs = Vec::with_capacity(self.activations.len());
        for (name, want) in &self.activations {
            let got = taps
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, f)| f)
                .ok_or_else(|| NetError::MissingTensor(format!("{ACTIVATION_PREFIX}{name}")))?;
            activation_max_abs.push((name.clone(), max_abs(name, got, want)?));
        }
        Ok(ParityReport { output_max_abs, activation_max_abs })
    }
}

fn max_abs(name: &str, got: &FeatureMap, want: &FeatureMap) -> Result<f32> {
    let gs = [got.channels, got.height, got.width];
    let ws = [want.channels, want.height, want.width];
    if gs != ws {
        return Err(NetError::ShapeMismatch { name: name.into(), expected: ws.to_vec(), found: gs.to_vec() });
    }
    Ok(got.data.iter().zip(&want.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> ParityFixture {
        let m = |c, v: f32| FeatureMap::new(c, 2, 2, vec![v; 4 * c]).unwrap();
        ParityFixture {
            input: m(2, 0.5),
            expected_output: m(1, -1.0),
            timestep: Some(980),
            slice_index: 3,
            num_views: 20,
            activations: vec![("mid".into(), m(1, 2.0))],
        }
    }

    #[test]
    fn container_round_trip() {
        let f = fixture();
        let bytes = f.to_container().unwrap().to_bytes().unwrap();
        assert_eq!(ParityFixture::from_bytes(&bytes).unwrap(), f);
        let g = ParityFixture { timestep: None, activations: vec![], ..f };
        let bytes = g.to_container().unwrap().to_bytes().unwrap();
        assert_eq!(ParityFixture::from_bytes(&bytes).unwrap(), g);
    }

    #[test]
    fn rejects_wrong_kind_and_bad_scalars() {
        let mut c = Container::new(r#"{"kind":"weights"}"#);
        c.insert("input", Tensor::zeros(vec![1, 1, 1])).unwrap();
        assert!(matches!(ParityFixture::from_container(&c), Err(NetError::BadDescriptor(_))));

        let mut c = fixture().to_container().unwrap();
        c.get_mut("slice_index").unwrap().data_mut()[0] = 1.5;
        assert!(ParityFixture::from_container(&c).is_err());

        let mut c = fixture().to_container().unwrap();
        c.insert("extra", Tensor::scalar(0.0)).unwrap();
        assert!(matches!(ParityFixture::from_container(&c), Err(NetError::UnexpectedTensor(_))));
    }
}
