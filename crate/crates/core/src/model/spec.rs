use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkernel::conv::conv_output_dim;
use crate::nnkernel::pool::pool_output_dim;

fn default_init_std() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    #[serde(rename = "maxpool")]
    MaxPool { window: usize, stride: usize },
    Relu,
    Dropout { rate: f64 },
    Fc { units: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLayer")]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// Flat form of a layer record; lets unknown keys be rejected, which
/// `#[serde(flatten)]` alone cannot do.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    name: String,
    #[serde(rename = "type")]
    kind: String,
    out_channels: Option<usize>,
    kernel_h: Option<usize>,
    kernel_w: Option<usize>,
    stride: Option<usize>,
    pad: Option<usize>,
    groups: Option<usize>,
    window: Option<usize>,
    rate: Option<f64>,
    units: Option<usize>,
}

impl TryFrom<RawLayer> for LayerSpec {
    type Error = String;

    fn try_from(r: RawLayer) -> std::result::Result<Self, String> {
        let name = r.name;
        let need = |v: Option<usize>, key: &str| v.ok_or_else(|| format!("layer `{name}` needs `{key}`"));
        let present: Vec<&str> = [
            ("out_channels", r.out_channels.is_some()),
            ("kernel_h", r.kernel_h.is_some()),
            ("kernel_w", r.kernel_w.is_some()),
            ("stride", r.stride.is_some()),
            ("pad", r.pad.is_some()),
            ("groups", r.groups.is_some()),
            ("window", r.window.is_some()),
            ("rate", r.rate.is_some()),
            ("units", r.units.is_some()),
        ]
        .into_iter()
        .filter_map(|(k, p)| p.then_some(k))
        .collect();
        let allowed: &[&str] = match r.kind.as_str() {
            "conv" => &["out_channels", "kernel_h", "kernel_w", "stride", "pad", "groups"],
            "maxpool" => &["window", "stride"],
            "relu" => &[],
            "dropout" => &["rate"],
            "fc" => &["units"],
            other => return Err(format!("layer `{name}` has unknown type `{other}`")),
        };
        if let Some(extra) = present.iter().find(|k| !allowed.contains(k)) {
            return Err(format!("layer `{name}` of type {} does not take `{extra}`", r.kind));
        }
        let kind = match r.kind.as_str() {
            "conv" => LayerKind::Conv {
                out_channels: need(r.out_channels, "out_channels")?,
                kernel_h: need(r.kernel_h, "kernel_h")?,
                kernel_w: need(r.kernel_w, "kernel_w")?,
                stride: r.stride.unwrap_or(1),
                pad: r.pad.unwrap_or(0),
                groups: r.groups.unwrap_or(1),
            },
            "maxpool" => LayerKind::MaxPool { window: need(r.window, "window")?, stride: need(r.stride, "stride")? },
            "relu" => LayerKind::Relu,
            "dropout" => LayerKind::Dropout { rate: r.rate.ok_or_else(|| format!("layer `{name}` needs `rate`"))? },
            _ => LayerKind::Fc { units: need(r.units, "units")? },
        };
        Ok(LayerSpec { name, kind })
    }
}

impl LayerSpec {
    pub fn new(name: &str, kind: LayerKind) -> Self {
        LayerSpec { name: name.to_string(), kind }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }
}

fn conv(name: &str, k: usize, size: usize, stride: usize, pad: usize, groups: usize) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv { out_channels: k, kernel_h: size, kernel_w: size, stride, pad, groups },
    )
}

fn relu(name: &str) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Relu)
}

fn pool(name: &str, window: usize, stride: usize) -> LayerSpec {
    LayerSpec::new(name, LayerKind::MaxPool { window, stride })
}

fn fc(name: &str, units: usize) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Fc { units })
}

fn dropout(name: &str, rate: f64) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Dropout { rate })
}

/// Layer-by-layer description of a classifier. The last layer is the
/// fully connected output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Input image shape `[channels, height, width]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub n_outputs: usize,
    #[serde(default)]
    pub lr_mult_map: BTreeMap<String, f64>,
    /// Standard deviation of the Gaussian weight init; biases start at zero.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

/// Shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ModelSpec {
    /// Three conv blocks and two fc layers on 3×32×32 input.
    pub fn desk(n_outputs: usize) -> Self {
        Self::desk_with_input([3, 32, 32], n_outputs)
    }

    pub fn desk_with_input(input: [usize; 3], n_outputs: usize) -> Self {
        ModelSpec {
            input,
            layers: vec![
                conv("conv1", 32, 5, 1, 2, 1),
                relu("relu1"),
                pool("pool1", 2, 2),
                conv("conv2", 64, 5, 1, 2, 1),
                relu("relu2"),
                pool("pool2", 2, 2),
                conv("conv3", 64, 3, 1, 1, 1),
                relu("relu3"),
                fc("fc4", 256),
                relu("relu4"),
                dropout("drop4", 0.5),
                fc("fc5", n_outputs),
            ],
            n_outputs,
            lr_mult_map: BTreeMap::new(),
            init_std: default_init_std(),
        }
    }

    /// AlexNet layer geometry (grouped conv2/4/5, no local response
    /// normalization) on 3×227×227 input.
    pub fn alexnet(n_outputs: usize) -> Self {
        ModelSpec {
            input: [3, 227, 227],
            layers: vec![
                conv("conv1", 96, 11, 4, 0, 1),
                relu("relu1"),
                pool("pool1", 3, 2),
                conv("conv2", 256, 5, 1, 2, 2),
                relu("relu2"),
                pool("pool2", 3, 2),
                conv("conv3", 384, 3, 1, 1, 1),
                relu("relu3"),
                conv("conv4", 384, 3, 1, 1, 2),
                relu("relu4"),
                conv("conv5", 256, 3, 1, 1, 2),
                relu("relu5"),
                pool("pool5", 3, 2),
                fc("fc6", 4096),
                relu("relu6"),
                dropout("drop6", 0.5),
                fc("fc7", 4096),
                relu("relu7"),
                dropout("drop7", 0.5),
                fc("fc8", n_outputs),
            ],
            n_outputs,
            lr_mult_map: BTreeMap::new(),
            init_std: default_init_std(),
        }
    }

    pub fn by_name(name: &str, n_outputs: usize) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk(n_outputs)),
            "alexnet" => Some(Self::alexnet(n_outputs)),
            _ => None,
        }
    }

    pub fn head(&self) -> &LayerSpec {
        self.layers.last().expect("validated spec has layers")
    }

    /// Name of the layer whose output feeds the head.
    pub fn feature_layer(&self) -> Option<&str> {
        let n = self.layers.len();
        (n >= 2).then(|| self.layers[n - 2].name.as_str())
    }

    pub fn conv_layer_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .map(|l| l.name.as_str())
            .collect()
    }

    /// Dry-run shape pass: output shape after each layer, in order. Errors
    /// name the offending layer.
    pub fn shape_chain(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let fail = |layer: &str, msg: String| Err(Error::Shape(format!("layer `{layer}`: {msg}")));
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("input shape {:?} has a zero dimension", self.input)));
        }
        let mut names = BTreeSet::new();
        let mut cur: Vec<usize> = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            if !names.insert(l.name.as_str()) {
                return fail(&l.name, "duplicate layer name".into());
            }
            cur = match &l.kind {
                LayerKind::Conv { out_channels, kernel_h, kernel_w, stride, pad, groups } => {
                    if cur.len() != 3 {
                        return fail(&l.name, format!("conv needs [C,H,W] input, got {cur:?}"));
                    }
                    if *out_channels == 0 || *groups == 0 || cur[0] % groups != 0 || out_channels % groups != 0 {
                        return fail(
                            &l.name,
                            format!("{} input / {out_channels} output channels with {groups} group(s)", cur[0]),
                        );
                    }
                    match (
                        conv_output_dim(cur[1], *kernel_h, *stride, *pad),
                        conv_output_dim(cur[2], *kernel_w, *stride, *pad),
                    ) {
                        (Some(h), Some(w)) => vec![*out_channels, h, w],
                        _ => return fail(&l.name, format!("kernel {kernel_h}x{kernel_w} does not fit {cur:?}")),
                    }
                }
                LayerKind::MaxPool { window, stride } => {
                    if cur.len() != 3 {
                        return fail(&l.name, format!("pool needs [C,H,W] input, got {cur:?}"));
                    }
                    match (pool_output_dim(cur[1], *window, *stride), pool_output_dim(cur[2], *window, *stride)) {
                        (Some(h), Some(w)) => vec![cur[0], h, w],
                        _ => return fail(&l.name, format!("window {window} does not fit {cur:?}")),
                    }
                }
                LayerKind::Relu => cur,
                LayerKind::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return fail(&l.name, format!("dropout rate {rate} not in [0,1)"));
                    }
                    cur
                }
                LayerKind::Fc { units } => {
                    if *units == 0 {
                        return fail(&l.name, "fc with zero units".into());
                    }
                    vec![*units]
                }
            };
            out.push((l.name.clone(), cur.clone()));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        match self.layers.last() {
            Some(LayerSpec { kind: LayerKind::Fc { units }, .. }) if *units == self.n_outputs => {}
            Some(l) => {
                return Err(Error::Validation(format!(
                    "last layer `{}` must be fc with {} units",
                    l.name, self.n_outputs
                )))
            }
            None => return Err(Error::Validation("model has no layers".into())),
        }
        self.shape_chain()?;
        for (name, mult) in &self.lr_mult_map {
            if !self.layers.iter().any(|l| &l.name == name && l.is_parametric()) {
                return Err(Error::Validation(format!("lr_mult_map names unknown layer `{name}`")));
            }
            if !(*mult >= 0.0 && mult.is_finite()) {
                return Err(Error::Validation(format!("lr_mult for `{name}` is {mult}")));
            }
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Validation(format!("init_std {} must be positive", self.init_std)));
        }
        Ok(())
    }

    /// Parameter tensors in layer order, weight before bias.
    pub fn param_shapes(&self) -> Result<Vec<ParamShape>> {
        let chain = self.shape_chain()?;
        let mut prev: Vec<usize> = self.input.to_vec();
        let mut out = Vec::new();
        for (l, (_, shape)) in self.layers.iter().zip(&chain) {
            match &l.kind {
                LayerKind::Conv { out_channels, kernel_h, kernel_w, groups, .. } => {
                    out.push(ParamShape {
                        name: format!("{}.weight", l.name),
                        shape: vec![*out_channels, prev[0] / groups, *kernel_h, *kernel_w],
                    });
                    out.push(ParamShape { name: format!("{}.bias", l.name), shape: vec![*out_channels] });
                }
                LayerKind::Fc { units } => {
                    let d: usize = prev.iter().product();
                    out.push(ParamShape { name: format!("{}.weight", l.name), shape: vec![*units, d] });
                    out.push(ParamShape { name: format!("{}.bias", l.name), shape: vec![*units] });
                }
                _ => {}
            }
            prev = shape.clone();
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.param_shapes()?.iter().map(|p| p.shape.iter().product::<usize>()).sum())
    }
}
