use std::fmt::{self, Write as _};
use std::path::Path;

use super::ModelError;

/// One layer of the feed-forward stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Affine {
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Affine { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::GlobalAvgPool => "gap",
            LayerSpec::Affine { .. } => "affine",
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => write!(f, "conv {out_channels} {kernel} {stride} {pad}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool { size, stride } if size == stride => write!(f, "maxpool {size}"),
            LayerSpec::MaxPool { size, stride } => write!(f, "maxpool {size} {stride}"),
            LayerSpec::GlobalAvgPool => f.write_str("gap"),
            LayerSpec::Affine { out_features } => write!(f, "affine {out_features}"),
        }
    }
}

/// A layer whose output, globally average pooled, feeds the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub layer: usize,
    pub weight: f64,
}

/// Shape of one activation, without the batch axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Map { c, h, w } => c * h * w,
            ActShape::Flat(d) => d,
        }
    }

    /// Feature width after global average pooling (identity for flat).
    pub fn pooled_width(&self) -> usize {
        match *self {
            ActShape::Map { c, .. } => c,
            ActShape::Flat(d) => d,
        }
    }
}

impl fmt::Display for ActShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActShape::Map { c, h, w } => write!(f, "{c}x{h}x{w}"),
            ActShape::Flat(d) => write!(f, "{d}"),
        }
    }
}

/// Layer graph of the network plus its contrastive taps.
///
/// The text form is line oriented, one directive per line:
///
/// ```text
/// input 3 32 32
/// conv 16 3 1 1
/// relu
/// maxpool 2
/// gap
/// affine 10
/// tap 3 1.0
/// ```
///
/// `input` declares channels and the nominal spatial size used for parameter
/// initialization; the network accepts any spatial size that chains. An
/// optional `mean m0 m1 ..` line subtracts a per-channel mean from inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub input_size: (usize, usize),
    pub layers: Vec<LayerSpec>,
    pub taps: Vec<Tap>,
    pub channel_mean: Option<Vec<f64>>,
}

impl ModelSpec {
    /// The default desk-scale network: three conv3x3-relu-maxpool2 blocks of
    /// widths 16/32/64, global average pooling and an affine head, with the
    /// contrastive tap on the pooled 64-wide features.
    pub fn reference(input_channels: usize, input_size: usize, num_classes: usize) -> Self {
        let mut layers = Vec::new();
        for width in [16, 32, 64] {
            layers.push(LayerSpec::Conv {
                out_channels: width,
                kernel: 3,
                stride: 1,
                pad: 1,
            });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool { size: 2, stride: 2 });
        }
        layers.push(LayerSpec::GlobalAvgPool);
        let tap = layers.len() - 1;
        layers.push(LayerSpec::Affine {
            out_features: num_classes,
        });
        ModelSpec {
            input_channels,
            input_size: (input_size, input_size),
            layers,
            taps: vec![Tap {
                layer: tap,
                weight: 1.0,
            }],
            channel_mean: None,
        }
    }

    /// Output width of the final affine layer.
    pub fn num_classes(&self) -> Result<usize, ModelError> {
        match self.layers.last() {
            Some(LayerSpec::Affine { out_features }) => Ok(*out_features),
            _ => Err(ModelError::Config(
                "the last layer must be `affine <classes>`".into(),
            )),
        }
    }

    /// Index of the deepest tapped layer.
    pub fn tap_depth(&self) -> usize {
        self.taps.iter().map(|t| t.layer).max().unwrap_or(0)
    }

    /// Chains shapes through every layer for a `[C, H, W]` input, returning
    /// the output shape of each layer. Also checks taps and the head.
    pub fn validate(
        &self,
        channels: usize,
        h: usize,
        w: usize,
    ) -> Result<Vec<ActShape>, ModelError> {
        if channels != self.input_channels {
            return Err(ModelError::Config(format!(
                "input has {channels} channels, spec declares {}",
                self.input_channels
            )));
        }
        if let Some(mean) = &self.channel_mean {
            if mean.len() != channels {
                return Err(ModelError::Config(format!(
                    "`mean` lists {} values for {channels} channels",
                    mean.len()
                )));
            }
        }
        if self.layers.is_empty() {
            return Err(ModelError::Config("spec has no layers".into()));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = ActShape::Map { c: channels, h, w };
        for (i, layer) in self.layers.iter().enumerate() {
            cur = next_shape(i, layer, cur)?;
            shapes.push(cur);
        }
        if self.taps.is_empty() {
            return Err(ModelError::Config("spec declares no `tap`".into()));
        }
        for tap in &self.taps {
            if tap.layer >= self.layers.len() {
                return Err(ModelError::Config(format!(
                    "tap index {} out of range for {} layers",
                    tap.layer,
                    self.layers.len()
                )));
            }
            if !(tap.weight >= 0.0 && tap.weight.is_finite()) {
                return Err(ModelError::Config(format!(
                    "tap {} has invalid weight {}",
                    tap.layer, tap.weight
                )));
            }
        }
        self.num_classes()?;
        Ok(shapes)
    }

    /// Validation against the declared nominal input size.
    pub fn validate_nominal(&self) -> Result<Vec<ActShape>, ModelError> {
        let (h, w) = self.input_size;
        self.validate(self.input_channels, h, w)
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut input = None;
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let mut channel_mean = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ModelError::Parse {
                line: lineno + 1,
                msg,
            };
            let mut words = line.split_whitespace();
            let head = words.next().expect("non-empty line");
            let args: Vec<&str> = words.collect();
            let ints = || -> Result<Vec<usize>, ModelError> {
                args.iter()
                    .map(|a| {
                        a.parse::<usize>().map_err(|_| {
                            err(format!("`{head}` expects integer arguments, got `{a}`"))
                        })
                    })
                    .collect()
            };
            let arity = |lo: usize, hi: usize| -> Result<(), ModelError> {
                if args.len() < lo || args.len() > hi {
                    Err(err(format!(
                        "`{head}` takes {lo}..={hi} arguments, got {}",
                        args.len()
                    )))
                } else {
                    Ok(())
                }
            };
            match head {
                "input" => {
                    arity(3, 3)?;
                    let v = ints()?;
                    input = Some((v[0], (v[1], v[2])));
                }
                "conv" => {
                    arity(2, 4)?;
                    let v = ints()?;
                    layers.push(LayerSpec::Conv {
                        out_channels: v[0],
                        kernel: v[1],
                        stride: v.get(2).copied().unwrap_or(1),
                        pad: v.get(3).copied().unwrap_or(0),
                    });
                }
                "relu" => {
                    arity(0, 0)?;
                    layers.push(LayerSpec::Relu);
                }
                "maxpool" => {
                    arity(1, 2)?;
                    let v = ints()?;
                    layers.push(LayerSpec::MaxPool {
                        size: v[0],
                        stride: v.get(1).copied().unwrap_or(v[0]),
                    });
                }
                "gap" => {
                    arity(0, 0)?;
                    layers.push(LayerSpec::GlobalAvgPool);
                }
                "affine" => {
                    arity(1, 1)?;
                    layers.push(LayerSpec::Affine {
                        out_features: ints()?[0],
                    });
                }
                "tap" => {
                    arity(1, 2)?;
                    let layer = args[0]
                        .parse()
                        .map_err(|_| err(format!("tap index `{}` is not an integer", args[0])))?;
                    let weight = match args.get(1) {
                        Some(a) => a
                            .parse()
                            .map_err(|_| err(format!("tap weight `{a}` is not a number")))?,
                        None => 1.0,
                    };
                    taps.push(Tap { layer, weight });
                }
                "mean" => {
                    let v = args
                        .iter()
                        .map(|a| {
                            a.parse::<f64>()
                                .map_err(|_| err(format!("mean value `{a}` is not a number")))
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    channel_mean = Some(v);
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }
        let (input_channels, input_size) = input.ok_or_else(|| {
            ModelError::Config("spec is missing `input <channels> <height> <width>`".into())
        })?;
        let spec = ModelSpec {
            input_channels,
            input_size,
            layers,
            taps,
            channel_mean,
        };
        spec.validate_nominal()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&text)
    }

    /// Canonical text encoding; `parse(to_text())` reproduces the spec.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let (h, w) = self.input_size;
        writeln!(out, "input {} {h} {w}", self.input_channels).unwrap();
        if let Some(mean) = &self.channel_mean {
            out.push_str("mean");
            for m in mean {
                // `{:?}` on f64 is the shortest representation that round-trips.
                write!(out, " {m:?}").unwrap();
            }
            out.push('\n');
        }
        for layer in &self.layers {
            writeln!(out, "{layer}").unwrap();
        }
        for tap in &self.taps {
            writeln!(out, "tap {} {:?}", tap.layer, tap.weight).unwrap();
        }
        out
    }
}

fn next_shape(index: usize, layer: &LayerSpec, cur: ActShape) -> Result<ActShape, ModelError> {
    let map = |cur: ActShape| match cur {
        ActShape::Map { c, h, w } => Ok((c, h, w)),
        ActShape::Flat(_) => Err(ModelError::Config(format!(
            "layer {index} (`{layer}`) needs a spatial feature map, got a flat vector"
        ))),
    };
    let shrink = |extent: usize, kernel: usize, stride: usize, pad: usize, dim: &str| {
        let padded = extent + 2 * pad;
        if stride == 0 || kernel == 0 || kernel > padded {
            Err(ModelError::Config(format!(
                "layer {index} (`{layer}`): window {kernel}/stride {stride} does not fit {dim} {extent} (padded {padded})"
            )))
        } else {
            Ok((padded - kernel) / stride + 1)
        }
    };
    Ok(match *layer {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            pad,
        } => {
            let (_, h, w) = map(cur)?;
            if out_channels == 0 {
                return Err(ModelError::Config(format!(
                    "layer {index}: conv needs >= 1 output channel"
                )));
            }
            ActShape::Map {
                c: out_channels,
                h: shrink(h, kernel, stride, pad, "height")?,
                w: shrink(w, kernel, stride, pad, "width")?,
            }
        }
        LayerSpec::Relu => cur,
        LayerSpec::MaxPool { size, stride } => {
            let (c, h, w) = map(cur)?;
            ActShape::Map {
                c,
                h: shrink(h, size, stride, 0, "height")?,
                w: shrink(w, size, stride, 0, "width")?,
            }
        }
        LayerSpec::GlobalAvgPool => ActShape::Flat(map(cur)?.0),
        LayerSpec::Affine { out_features } => {
            if out_features == 0 {
                return Err(ModelError::Config(format!(
                    "layer {index}: affine needs >= 1 output"
                )));
            }
            ActShape::Flat(out_features)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_spec_chains() {
        let spec = ModelSpec::reference(3, 32, 10);
        let shapes = spec.validate_nominal().unwrap();
        assert_eq!(shapes[8], ActShape::Map { c: 64, h: 4, w: 4 });
        assert_eq!(shapes[9], ActShape::Flat(64));
        assert_eq!(*shapes.last().unwrap(), ActShape::Flat(10));
        assert_eq!(
            spec.taps,
            vec![Tap {
                layer: 9,
                weight: 1.0
            }]
        );
        // full 64x64 images also chain
        assert!(spec.validate(3, 64, 64).is_ok());
    }

    #[test]
    fn text_round_trip() {
        let mut spec = ModelSpec::reference(3, 32, 10);
        spec.taps.push(Tap {
            layer: 5,
            weight: 0.25,
        });
        spec.channel_mean = Some(vec![0.1, 0.2, 0.30000000000000004]);
        let back = ModelSpec::parse(&spec.to_text()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn parses_hand_written_file() {
        let text = "# toy\ninput 1 8 8\nconv 4 3 1 1\nrelu\nmaxpool 2\ngap\naffine 2\ntap 3\n";
        let spec = ModelSpec::parse(text).unwrap();
        assert_eq!(spec.layers.len(), 5);
        assert_eq!(spec.num_classes().unwrap(), 2);
        assert_eq!(spec.taps[0].weight, 1.0);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = ModelSpec::parse("input 1 8 8\nconv x 3\n").unwrap_err();
        assert!(matches!(err, ModelError::Parse { line: 2, .. }), "{err}");
        let err = ModelSpec::parse("input 1 8 8\nflatten\n").unwrap_err();
        assert!(err.to_string().contains("unknown directive"));
    }

    #[test]
    fn rejects_broken_chains() {
        // pooling a flat vector
        let err = ModelSpec::parse("input 1 4 4\ngap\nmaxpool 2\naffine 2\ntap 0\n").unwrap_err();
        assert!(err.to_string().contains("spatial feature map"), "{err}");
        // kernel larger than the image
        let err = ModelSpec::parse("input 1 2 2\nconv 2 3\ngap\naffine 2\ntap 1\n").unwrap_err();
        assert!(err.to_string().contains("does not fit"), "{err}");
        // tap out of range
        let err = ModelSpec::parse("input 1 4 4\ngap\naffine 2\ntap 7\n").unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
        // no head
        let err = ModelSpec::parse("input 1 4 4\ngap\ntap 0\n").unwrap_err();
        assert!(err.to_string().contains("last layer"), "{err}");
    }
}
