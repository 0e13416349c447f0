//! Declarative layer lists for the two architectures and symbolic shape tracing.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::ops::{output_extent, Padding, LEAKY_ALPHA};
use crate::recurrent::ReturnMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Two branches (main + support) fused by addition; state reset every batch.
    Stateless,
    /// One branch whose recurrent state survives across calls until reset.
    Stateful,
}

impl Architecture {
    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::Stateless => "stateless",
            Architecture::Stateful => "stateful",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stateless" => Ok(Architecture::Stateless),
            "stateful" => Ok(Architecture::Stateful),
            other => Err(Error::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

/// How padding is chosen per layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingRule {
    /// Stride-1 ConvLSTM layers use SAME; strided layers and all plain
    /// convolutions use VALID. Reproduces the published output sizes at 64×64.
    Reference,
    /// SAME everywhere, for small inputs where VALID would collapse the grid.
    Same,
}

impl PaddingRule {
    fn recurrent(self, stride: usize) -> Padding {
        match self {
            PaddingRule::Reference if stride > 1 => Padding::Valid,
            _ => Padding::Same,
        }
    }

    fn conv(self) -> Padding {
        match self {
            PaddingRule::Reference => Padding::Valid,
            PaddingRule::Same => Padding::Same,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PaddingRule::Reference => "reference",
            PaddingRule::Same => "same",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    ConvLstm {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        return_mode: ReturnMode,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm,
    LeakyRelu(f64),
    Add,
    GlobalAvgPool,
    Dropout(f64),
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }
}

/// Per-sample symbolic shape (batch axis omitted).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SymShape {
    /// `(T, H, W, C)`
    Seq([usize; 4]),
    /// `(H, W, C)`
    Map([usize; 3]),
}

impl SymShape {
    pub fn channels(&self) -> usize {
        match *self {
            SymShape::Seq([.., c]) | SymShape::Map([.., c]) => c,
        }
    }

    fn spatial(&self) -> (usize, usize) {
        match *self {
            SymShape::Seq([_, h, w, _]) | SymShape::Map([h, w, _]) => (h, w),
        }
    }
}

impl fmt::Display for SymShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SymShape::Seq([t, h, w, c]) => write!(f, "({t}, {h}, {w}, {c})"),
            SymShape::Map([h, w, c]) => write!(f, "({h}, {w}, {c})"),
        }
    }
}

/// Width and geometry knobs shared by both builders.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub num_classes: usize,
    /// Frames per input clip.
    pub frames: usize,
    /// Square input side.
    pub size: usize,
    /// Filters of the four main-branch ConvLSTM layers.
    pub main_widths: [usize; 4],
    /// Filters of the two support-branch ConvLSTM layers (stateless only).
    pub support_widths: [usize; 2],
    /// Filters of the decision-block convolutions.
    pub decision_width: usize,
    pub padding: PaddingRule,
    /// Dropout before the decision block (stateful only).
    pub dropout: f64,
    pub leaky_alpha: f64,
    pub peephole: bool,
}

impl ArchConfig {
    /// Full-size stateless configuration: 30 frames of 64×64.
    pub fn stateless(num_classes: usize) -> Self {
        ArchConfig {
            num_classes,
            frames: 30,
            size: 64,
            main_widths: [32, 32, 128, 256],
            support_widths: [8, 16],
            decision_width: 128,
            padding: PaddingRule::Reference,
            dropout: 0.0,
            leaky_alpha: LEAKY_ALPHA,
            peephole: false,
        }
    }

    /// Full-size stateful configuration: 8-frame windows of 64×64.
    pub fn stateful(num_classes: usize) -> Self {
        ArchConfig {
            frames: 8,
            main_widths: [32, 64, 128, 256],
            support_widths: [0, 0],
            dropout: 0.25,
            ..Self::stateless(num_classes)
        }
    }

    /// Reduced-width variant for small inputs (SAME padding throughout).
    pub fn scaled(
        mut self,
        size: usize,
        main_widths: [usize; 4],
        support_widths: [usize; 2],
        decision_width: usize,
    ) -> Self {
        self.size = size;
        self.main_widths = main_widths;
        self.support_widths = support_widths;
        self.decision_width = decision_width;
        self.padding = PaddingRule::Same;
        self
    }

    pub(crate) fn to_metadata(&self, arch: Architecture, out: &mut BTreeMap<String, String>) {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        out.insert("arch".into(), arch.to_string());
        out.insert("arch.num_classes".into(), self.num_classes.to_string());
        out.insert("arch.frames".into(), self.frames.to_string());
        out.insert("arch.size".into(), self.size.to_string());
        out.insert("arch.main_widths".into(), list(&self.main_widths));
        out.insert("arch.support_widths".into(), list(&self.support_widths));
        out.insert("arch.decision_width".into(), self.decision_width.to_string());
        out.insert("arch.padding".into(), self.padding.as_str().into());
        out.insert("arch.dropout".into(), self.dropout.to_string());
        out.insert("arch.leaky_alpha".into(), self.leaky_alpha.to_string());
        out.insert("arch.peephole".into(), self.peephole.to_string());
    }

    pub(crate) fn from_metadata(meta: &BTreeMap<String, String>) -> Result<(Architecture, Self)> {
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::invalid(format!("checkpoint metadata lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::invalid(format!("bad `{k}`"))) };
        let real = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::invalid(format!("bad `{k}`"))) };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|s| s.parse().map_err(|_| Error::invalid(format!("bad `{k}`"))))
                .collect()
        };
        let arch: Architecture = get("arch")?.parse()?;
        let main = list("arch.main_widths")?;
        let support = list("arch.support_widths")?;
        if main.len() != 4 || support.len() != 2 {
            return Err(Error::invalid("width lists have the wrong length"));
        }
        let padding = match get("arch.padding")?.as_str() {
            "reference" => PaddingRule::Reference,
            "same" => PaddingRule::Same,
            other => return Err(Error::invalid(format!("unknown padding rule `{other}`"))),
        };
        Ok((
            arch,
            ArchConfig {
                num_classes: num("arch.num_classes")?,
                frames: num("arch.frames")?,
                size: num("arch.size")?,
                main_widths: [main[0], main[1], main[2], main[3]],
                support_widths: [support[0], support[1]],
                decision_width: num("arch.decision_width")?,
                padding,
                dropout: real("arch.dropout")?,
                leaky_alpha: real("arch.leaky_alpha")?,
                peephole: get("arch.peephole")? == "true",
            },
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    pub config: ArchConfig,
    /// Main branch, up to the fusion point (or the decision block).
    pub main: Vec<LayerSpec>,
    /// Support branch; empty for the stateful network.
    pub support: Vec<LayerSpec>,
    /// Layers after the fusion point, ending in GAP and softmax.
    pub head: Vec<LayerSpec>,
}

/// One traced layer: `(branch, layer name, output shape)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub branch: &'static str,
    pub layer: String,
    pub shape: SymShape,
}

fn convlstm(name: String, filters: usize, kernel: usize, stride: usize, rule: PaddingRule, last: bool) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::ConvLstm {
            filters,
            kernel,
            stride,
            padding: rule.recurrent(stride),
            return_mode: if last { ReturnMode::Last } else { ReturnMode::Full },
        },
    )
}

fn conv(name: &str, filters: usize, kernel: usize, stride: usize, padding: Padding) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv2d {
            filters,
            kernel,
            stride,
            padding,
        },
    )
}

impl NetworkSpec {
    pub fn stateless(config: ArchConfig) -> Result<Self> {
        check_classes(config.num_classes)?;
        let rule = config.padding;
        let alpha = config.leaky_alpha;
        let strides = [1, 2, 1, 2];
        let mut main = Vec::new();
        for (i, (&w, &s)) in config.main_widths.iter().zip(&strides).enumerate() {
            let n = i + 1;
            main.push(convlstm(format!("convlstm{n}"), w, 3, s, rule, n == 4));
            main.push(LayerSpec::new(format!("bn{n}"), LayerKind::BatchNorm));
            main.push(LayerSpec::new(format!("lrelu{n}"), LayerKind::LeakyRelu(alpha)));
        }
        main.push(conv("conv2d", config.decision_width, 3, 1, rule.conv()));

        let [s1, s2] = config.support_widths;
        let support = vec![
            convlstm("convlstm1".into(), s1, 7, 2, rule, false),
            LayerSpec::new("bn1", LayerKind::BatchNorm),
            convlstm("convlstm2".into(), s2, 5, 2, rule, true),
            LayerSpec::new("bn2", LayerKind::BatchNorm),
            conv("conv2d", config.decision_width, 1, 1, rule.conv()),
        ];

        let head = vec![
            LayerSpec::new("add", LayerKind::Add),
            LayerSpec::new("lrelu1", LayerKind::LeakyRelu(alpha)),
            conv("conv2d1", config.decision_width, 3, 2, rule.conv()),
            LayerSpec::new("bn1", LayerKind::BatchNorm),
            LayerSpec::new("lrelu2", LayerKind::LeakyRelu(alpha)),
            conv("conv2d2", config.num_classes, 1, 1, rule.conv()),
            LayerSpec::new("gap", LayerKind::GlobalAvgPool),
            LayerSpec::new("softmax", LayerKind::Softmax),
        ];
        let spec = NetworkSpec {
            architecture: Architecture::Stateless,
            config,
            main,
            support,
            head,
        };
        spec.trace()?;
        Ok(spec)
    }

    pub fn stateful(config: ArchConfig) -> Result<Self> {
        check_classes(config.num_classes)?;
        let rule = config.padding;
        let alpha = config.leaky_alpha;
        let strides = [1, 2, 1, 2];
        let mut main = Vec::new();
        for (i, (&w, &s)) in config.main_widths.iter().zip(&strides).enumerate() {
            let n = i + 1;
            main.push(convlstm(format!("convlstm{n}"), w, 3, s, rule, n == 4));
            main.push(LayerSpec::new(format!("bn{n}"), LayerKind::BatchNorm));
        }
        if config.dropout > 0.0 {
            main.push(LayerSpec::new("dropout", LayerKind::Dropout(config.dropout)));
        }
        let head = vec![
            conv("conv2d1", config.decision_width, 3, 2, rule.conv()),
            LayerSpec::new("bn5", LayerKind::BatchNorm),
            LayerSpec::new("lrelu1", LayerKind::LeakyRelu(alpha)),
            conv("conv2d2", config.decision_width, 3, 2, rule.conv()),
            LayerSpec::new("bn6", LayerKind::BatchNorm),
            LayerSpec::new("lrelu2", LayerKind::LeakyRelu(alpha)),
            conv("conv2d3", config.num_classes, 1, 1, rule.conv()),
            LayerSpec::new("gap", LayerKind::GlobalAvgPool),
            LayerSpec::new("softmax", LayerKind::Softmax),
        ];
        let spec = NetworkSpec {
            architecture: Architecture::Stateful,
            config,
            main,
            support: Vec::new(),
            head,
        };
        spec.trace()?;
        Ok(spec)
    }

    pub fn input_shape(&self) -> SymShape {
        SymShape::Seq([self.config.frames, self.config.size, self.config.size, 1])
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Pushes the input shape through every layer.
    pub fn trace(&self) -> Result<Vec<TraceRow>> {
        let mut rows = Vec::new();
        let main_out = trace_branch("main", &self.main, self.input_shape(), &mut rows)?;
        let fused = if self.support.is_empty() {
            main_out
        } else {
            let support_out = trace_branch("support", &self.support, self.input_shape(), &mut rows)?;
            if support_out != main_out {
                return Err(Error::shape("add", "branch outputs", main_out, support_out));
            }
            main_out
        };
        let out = trace_branch("head", &self.head, fused, &mut rows)?;
        let want = SymShape::Map([1, 1, self.config.num_classes]);
        if out != want {
            return Err(Error::shape("network", "output", want, out));
        }
        Ok(rows)
    }
}

fn check_classes(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid("num_classes must be >= 2"));
    }
    Ok(())
}

fn spatial(op: &'static str, n: usize, k: usize, s: usize, p: Padding, axis: &'static str) -> Result<usize> {
    output_extent(n, k, s, p).ok_or(Error::DegenerateOutput {
        op,
        axis,
        extent: n,
        kernel: k,
        stride: s,
    })
}

fn trace_branch(
    branch: &'static str,
    layers: &[LayerSpec],
    mut shape: SymShape,
    rows: &mut Vec<TraceRow>,
) -> Result<SymShape> {
    for layer in layers {
        shape = match (&layer.kind, shape) {
            (
                &LayerKind::ConvLstm {
                    filters,
                    kernel,
                    stride,
                    padding,
                    return_mode,
                },
                SymShape::Seq([t, h, w, _]),
            ) => {
                let ho = spatial("convlstm", h, kernel, stride, padding, "height")?;
                let wo = spatial("convlstm", w, kernel, stride, padding, "width")?;
                let t = if return_mode == ReturnMode::Last { 1 } else { t };
                SymShape::Seq([t, ho, wo, filters])
            }
            (LayerKind::ConvLstm { .. }, other) => {
                return Err(Error::shape("convlstm", &layer.name, "sequence input", other));
            }
            (
                &LayerKind::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                },
                s,
            ) => {
                if let SymShape::Seq([t, ..]) = s {
                    if t != 1 {
                        return Err(Error::shape("conv2d", &layer.name, "single time step", s));
                    }
                }
                let (h, w) = s.spatial();
                let ho = spatial("conv2d", h, kernel, stride, padding, "height")?;
                let wo = spatial("conv2d", w, kernel, stride, padding, "width")?;
                SymShape::Map([ho, wo, filters])
            }
            (LayerKind::GlobalAvgPool, s) => SymShape::Map([1, 1, s.channels()]),
            (_, s) => s,
        };
        rows.push(TraceRow {
            branch,
            layer: layer.name.clone(),
            shape,
        });
    }
    Ok(shape)
}
