use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shipped reference architecture: a DDPM-style U-Net approximation with
/// self-attention at every level from half resolution down.
pub const REFERENCE_ARCH: &str = include_str!("reference_arch.json");

/// QKV and output projections `8·N·C²` plus `QKᵀ` and `AV` `4·N²·C`; a
/// multiply-add counts as 2 FLOPs, softmax is excluded.
pub fn flops_attention(n: usize, c: usize) -> f64 {
    let (n, c) = (n as f64, c as f64);
    8.0 * n * c * c + 4.0 * n * n * c
}

/// `k × k` convolution producing an `h × w × c_out` map.
pub fn flops_conv(h: usize, w: usize, c_in: usize, c_out: usize, k: usize) -> f64 {
    2.0 * (h * w) as f64 * (c_in * c_out * k * k) as f64
}

fn one() -> usize {
    1
}

/// One architecture entry; `scale` is the downsampling factor relative to
/// the input resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BlockSpec {
    Conv {
        scale: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        #[serde(default = "one")]
        repeat: usize,
    },
    /// Two 3×3 convolutions plus a 1×1 shortcut when widths differ.
    Resnet {
        scale: usize,
        c_in: usize,
        c_out: usize,
        #[serde(default = "one")]
        repeat: usize,
    },
    Attention {
        scale: usize,
        channels: usize,
        #[serde(default = "one")]
        repeat: usize,
    },
    Other {
        scale: usize,
        flops_per_pixel: f64,
        #[serde(default = "one")]
        repeat: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub name: String,
    #[serde(default)]
    pub note: String,
    pub blocks: Vec<BlockSpec>,
}

impl ArchConfig {
    pub fn parse(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Parse(format!("architecture config: {e}")))
    }

    pub fn reference() -> Self {
        Self::parse(REFERENCE_ARCH).expect("shipped config parses")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub resolution: usize,
    pub attention: f64,
    pub convolution: f64,
    pub resnet: f64,
    pub other: f64,
}

impl FlopsReport {
    pub fn total(&self) -> f64 {
        self.attention + self.convolution + self.resnet + self.other
    }

    /// Attention fraction of the total; 0 for an empty network.
    pub fn attention_share(&self) -> f64 {
        let t = self.total();
        if t == 0.0 {
            0.0
        } else {
            self.attention / t
        }
    }

    /// Attention over convolution plus resnet FLOPs.
    pub fn attention_to_conv(&self) -> f64 {
        let c = self.convolution + self.resnet;
        if c == 0.0 {
            f64::INFINITY
        } else {
            self.attention / c
        }
    }
}

pub fn unet_flops_breakdown(arch: &ArchConfig, resolution: usize) -> Result<FlopsReport> {
    let side = |scale: usize| -> Result<usize> {
        if scale == 0 || !resolution.is_multiple_of(scale) || resolution / scale == 0 {
            return Err(Error::Config(format!(
                "{}: scale {scale} does not divide resolution {resolution}",
                arch.name
            )));
        }
        Ok(resolution / scale)
    };
    let mut r = FlopsReport {
        resolution,
        attention: 0.0,
        convolution: 0.0,
        resnet: 0.0,
        other: 0.0,
    };
    for b in &arch.blocks {
        match *b {
            BlockSpec::Conv {
                scale,
                c_in,
                c_out,
                kernel,
                repeat,
            } => {
                let s = side(scale)?;
                r.convolution += repeat as f64 * flops_conv(s, s, c_in, c_out, kernel);
            }
            BlockSpec::Resnet {
                scale,
                c_in,
                c_out,
                repeat,
            } => {
                let s = side(scale)?;
                let mut f = flops_conv(s, s, c_in, c_out, 3) + flops_conv(s, s, c_out, c_out, 3);
                if c_in != c_out {
                    f += flops_conv(s, s, c_in, c_out, 1);
                }
                r.resnet += repeat as f64 * f;
            }
            BlockSpec::Attention { scale, channels, repeat } => {
                let s = side(scale)?;
                r.attention += repeat as f64 * flops_attention(s * s, channels);
            }
            BlockSpec::Other {
                scale,
                flops_per_pixel,
                repeat,
            } => {
                if !(flops_per_pixel >= 0.0) {
                    return Err(Error::Config("flops_per_pixel must be non-negative".into()));
                }
                let s = side(scale)?;
                r.other += repeat as f64 * flops_per_pixel * (s * s) as f64;
            }
        }
    }
    Ok(r)
}

pub fn flops_report_csv(arch: &ArchConfig, reports: &[FlopsReport]) -> String {
    let mut s = format!(
        "# {} (multiply-add = 2 FLOPs, softmax and normalization excluded)\n\
         resolution,attention_flops,conv_flops,resnet_flops,other_flops,total_flops,attention_share,attention_to_conv\n",
        arch.name
    );
    for r in reports {
        s.push_str(&format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6},{:.6}\n",
            r.resolution,
            r.attention,
            r.convolution,
            r.resnet,
            r.other,
            r.total(),
            r.attention_share(),
            r.attention_to_conv()
        ));
    }
    s
}
