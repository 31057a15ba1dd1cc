//! Parameter and FLOP accounting.
//!
//! FLOP convention, per sample:
//!
//! | layer | FLOPs |
//! |---|---|
//! | conv `C_in→C_out`, `k×k`, output `H'×W'` | `2·C_in·k²·C_out·H'·W'` + `C_out·H'·W'` bias adds |
//! | linear `F_in→F_out` | `2·F_in·F_out` + `F_out` bias adds |
//! | batch norm (inference affine) | `2·C·H·W` |
//! | ReLU, sigmoid | 1 per element |
//! | max pool `k×k` | `(k²−1)` comparisons per output |
//! | global average pool | `H·W` per channel (adds and one divide) |
//! | global max pool | `H·W − 1` per channel |
//! | CAM | both pools, shared MLP on two descriptors (linear + ReLU), descriptor add, sigmoid, channel scaling `C·H·W` |
//! | SAM | channel mean `C·H·W`, channel max `(C−1)·H·W`, `2→1` conv, sigmoid, scaling `C·H·W` |
//! | CBAM residual | `C·H·W` adds |
//!
//! Multiply-accumulate counts are doubled; every other element op counts
//! once.

use std::fmt::Write as _;

use serde::Serialize;

use crate::attention::hidden_width;
use crate::model::{HeadPool, Model, CONV_KERNEL, POOL};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub name: String,
    pub kind: &'static str,
    /// `[C, H, W]` of the layer output.
    pub output: [usize; 3],
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Report {
    pub layers: Vec<LayerCount>,
}

impl Report {
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    pub fn mflops(&self) -> f64 {
        self.total_flops() as f64 / 1e6
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCount> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<22} {:<10} {:>16} {:>12} {:>16}\n",
            "layer", "kind", "output", "params", "flops"
        );
        for l in &self.layers {
            let [c, h, w] = l.output;
            let _ = writeln!(
                s,
                "{:<22} {:<10} {:>16} {:>12} {:>16}",
                l.name,
                l.kind,
                format!("{c}x{h}x{w}"),
                l.params,
                l.flops
            );
        }
        let _ = writeln!(
            s,
            "total params {}  total flops {} ({:.3} MFLOPs)",
            self.total_params(),
            self.total_flops(),
            self.mflops()
        );
        s
    }
}

pub fn conv_flops(c_in: usize, c_out: usize, k: usize, h_out: usize, w_out: usize) -> u64 {
    let out = (c_out * h_out * w_out) as u64;
    2 * (c_in * k * k) as u64 * out + out
}

pub fn linear_flops(f_in: usize, f_out: usize) -> u64 {
    2 * (f_in * f_out) as u64 + f_out as u64
}

pub fn cam_flops(c: usize, h: usize, w: usize, reduction: usize) -> u64 {
    let hid = hidden_width(c, reduction);
    let (c64, hw) = (c as u64, (h * w) as u64);
    let mlp = linear_flops(c, hid) + hid as u64 + linear_flops(hid, c);
    c64 * hw + c64 * (hw - 1) + 2 * mlp + c64 + c64 + c64 * hw
}

pub fn sam_flops(c: usize, h: usize, w: usize, k: usize) -> u64 {
    let (c64, hw) = (c as u64, (h * w) as u64);
    c64 * hw + (c64 - 1) * hw + conv_flops(2, 1, k, h, w) + hw + c64 * hw
}

pub fn conv_params(c_in: usize, c_out: usize, k: usize) -> u64 {
    (c_in * k * k * c_out + c_out) as u64
}

/// Per-layer parameter and FLOP table for one sample. Parameter counts are
/// read from the model's tensors; FLOPs follow the module convention.
pub fn profile(model: &Model) -> Report {
    let cfg = &model.config;
    let (mut c, mut h, mut w) = (cfg.input_channels, cfg.input_height, cfg.input_width);
    let mut layers = Vec::new();
    for (i, stage) in model.stages.iter().enumerate() {
        for (j, l) in stage.layers.iter().enumerate() {
            let c_out = l.conv.out_channels();
            layers.push(LayerCount {
                name: format!("stage{i}.conv{j}"),
                kind: "conv",
                output: [c_out, h, w],
                params: (l.conv.weight.len() + l.conv.bias.len()) as u64,
                flops: conv_flops(c, c_out, CONV_KERNEL, h, w),
            });
            let elems = (c_out * h * w) as u64;
            layers.push(LayerCount {
                name: format!("stage{i}.bn{j}"),
                kind: "batchnorm",
                output: [c_out, h, w],
                params: (l.bn.gamma.len() + l.bn.beta.len()) as u64,
                flops: 2 * elems,
            });
            layers.push(LayerCount {
                name: format!("stage{i}.relu{j}"),
                kind: "relu",
                output: [c_out, h, w],
                params: 0,
                flops: elems,
            });
            c = c_out;
        }
        if let Some(cbam) = &stage.cbam {
            let cam = &cbam.cam;
            layers.push(LayerCount {
                name: format!("stage{i}.cbam.cam"),
                kind: "cam",
                output: [c, h, w],
                params: [&cam.fc1.weight, &cam.fc1.bias, &cam.fc2.weight, &cam.fc2.bias]
                    .iter()
                    .map(|t| t.len() as u64)
                    .sum(),
                flops: cam_flops(c, h, w, cfg.cbam.reduction),
            });
            layers.push(LayerCount {
                name: format!("stage{i}.cbam.sam"),
                kind: "sam",
                output: [c, h, w],
                params: (cbam.sam.conv.weight.len() + cbam.sam.conv.bias.len()) as u64,
                flops: sam_flops(c, h, w, cbam.sam.conv.kernel()),
            });
            if cbam.residual {
                layers.push(LayerCount {
                    name: format!("stage{i}.cbam.residual"),
                    kind: "add",
                    output: [c, h, w],
                    params: 0,
                    flops: (c * h * w) as u64,
                });
            }
        }
        h /= POOL;
        w /= POOL;
        layers.push(LayerCount {
            name: format!("stage{i}.pool"),
            kind: "maxpool",
            output: [c, h, w],
            params: 0,
            flops: ((POOL * POOL - 1) * c * h * w) as u64,
        });
    }
    let mut features = match model.head.pool {
        HeadPool::GlobalAvg => {
            layers.push(LayerCount {
                name: "head.pool".into(),
                kind: "avgpool",
                output: [c, 1, 1],
                params: 0,
                flops: (c * h * w) as u64,
            });
            c
        }
        HeadPool::Flatten => c * h * w,
    };
    for (j, l) in model.head.hidden.iter().enumerate() {
        let out = l.out_features();
        layers.push(LayerCount {
            name: format!("head.fc{j}"),
            kind: "linear",
            output: [out, 1, 1],
            params: (l.weight.len() + l.bias.len()) as u64,
            flops: linear_flops(features, out),
        });
        layers.push(LayerCount {
            name: format!("head.relu{j}"),
            kind: "relu",
            output: [out, 1, 1],
            params: 0,
            flops: out as u64,
        });
        features = out;
    }
    let k = model.head.classifier.out_features();
    layers.push(LayerCount {
        name: "head.classifier".into(),
        kind: "linear",
        output: [k, 1, 1],
        params: (model.head.classifier.weight.len() + model.head.classifier.bias.len()) as u64,
        flops: linear_flops(features, k),
    });
    Report { layers }
}

pub fn count_params(model: &Model) -> u64 {
    profile(model).total_params()
}

pub fn count_flops(model: &Model) -> u64 {
    profile(model).total_flops()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeltaRow {
    pub name: String,
    pub params: [u64; 2],
    pub flops: [u64; 2],
}

impl DeltaRow {
    pub fn param_delta(&self) -> i128 {
        self.params[1] as i128 - self.params[0] as i128
    }

    pub fn flop_delta(&self) -> i128 {
        self.flops[1] as i128 - self.flops[0] as i128
    }
}

/// Layer-by-layer comparison `b − a`; layers missing on one side count as
/// zero there. Rows follow `a`'s order, then `b`-only layers.
pub fn compare(a: &Report, b: &Report) -> Vec<DeltaRow> {
    let mut rows: Vec<DeltaRow> = a
        .layers
        .iter()
        .map(|l| {
            let other = b.layer(&l.name);
            DeltaRow {
                name: l.name.clone(),
                params: [l.params, other.map_or(0, |o| o.params)],
                flops: [l.flops, other.map_or(0, |o| o.flops)],
            }
        })
        .collect();
    rows.extend(b.layers.iter().filter(|l| a.layer(&l.name).is_none()).map(|l| DeltaRow {
        name: l.name.clone(),
        params: [0, l.params],
        flops: [0, l.flops],
    }));
    rows
}

pub fn render_comparison(a: &Report, b: &Report) -> String {
    let mut s = format!(
        "{:<22} {:>12} {:>12} {:>16} {:>16}\n",
        "layer", "Δparams", "Δ%params", "Δflops", "Δ%flops"
    );
    let pct = |d: i128, base: u64| {
        if base == 0 {
            "-".to_string()
        } else {
            format!("{:+.2}%", 100.0 * d as f64 / base as f64)
        }
    };
    for r in compare(a, b) {
        if r.params[0] == r.params[1] && r.flops[0] == r.flops[1] {
            continue;
        }
        let _ = writeln!(
            s,
            "{:<22} {:>12} {:>12} {:>16} {:>16}",
            r.name,
            r.param_delta(),
            pct(r.param_delta(), r.params[0]),
            r.flop_delta(),
            pct(r.flop_delta(), r.flops[0]),
        );
    }
    let dp = b.total_params() as i128 - a.total_params() as i128;
    let df = b.total_flops() as i128 - a.total_flops() as i128;
    let _ = writeln!(
        s,
        "{:<22} {:>12} {:>12} {:>16} {:>16}",
        "total",
        dp,
        pct(dp, a.total_params()),
        df,
        pct(df, a.total_flops())
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::CbamSettings;
    use crate::model::{build_model, HeadConfig, ModelConfig};

    #[test]
    fn single_layer_examples() {
        assert_eq!(conv_params(3, 64, 3), 1792);
        assert_eq!(conv_flops(1, 1, 1, 4, 4), 32 + 16);
        assert_eq!(linear_flops(512, 10), 2 * 512 * 10 + 10);
    }

    #[test]
    fn cbam_block_params() {
        let cfg = ModelConfig {
            input_channels: 64,
            input_height: 2,
            input_width: 2,
            stage_channels: vec![64],
            convs_per_block: 1,
            cbam_stages: None,
            cbam: CbamSettings {
                reduction: 16,
                kernel: 7,
                ..Default::default()
            },
            num_classes: 2,
            head: HeadConfig::default(),
        };
        let r = profile(&build_model(&cfg, 0).unwrap());
        let cam = r.layer("stage0.cbam.cam").unwrap().params;
        let sam = r.layer("stage0.cbam.sam").unwrap().params;
        assert_eq!(cam + sam, (64 * 4 + 4) + (4 * 64 + 64) + (2 * 7 * 7 + 1));
        assert_eq!(cam + sam, 679);
    }

    /// Spreadsheet-style count, independent of the built tensors.
    fn analytic(cfg: &ModelConfig) -> (u64, u64) {
        let mut params = 0u64;
        let mut flops = 0u64;
        let (mut c_in, mut h, mut w) = (cfg.input_channels, cfg.input_height, cfg.input_width);
        for (s, &c) in cfg.stage_channels.iter().enumerate() {
            let hw = (h * w) as u64;
            let cu = c as u64;
            for j in 0..cfg.convs_per_block {
                let ci = if j == 0 { c_in } else { c } as u64;
                params += ci * 9 * cu + cu + 2 * cu;
                flops += 2 * ci * 9 * cu * hw + cu * hw + 2 * cu * hw + cu * hw;
            }
            if cfg.has_cbam(s) {
                let hid = (c / cfg.cbam.reduction).max(1) as u64;
                let k2 = (cfg.cbam.kernel * cfg.cbam.kernel) as u64;
                params += cu * hid + hid + hid * cu + cu + 2 * k2 + 1;
                let mlp = 2 * cu * hid + hid + hid + 2 * hid * cu + cu;
                flops += cu * hw + cu * (hw - 1) + 2 * mlp + 2 * cu + cu * hw;
                flops += cu * hw + (cu - 1) * hw + 4 * k2 * hw + hw + hw + cu * hw;
                if cfg.cbam.residual {
                    flops += cu * hw;
                }
            }
            h /= 2;
            w /= 2;
            flops += 3 * cu * (h * w) as u64;
            c_in = c;
        }
        let c = c_in as u64;
        let mut f = match cfg.head.pool {
            HeadPool::GlobalAvg => {
                flops += c * (h * w) as u64;
                c
            }
            HeadPool::Flatten => c * (h * w) as u64,
        };
        for &hdim in &cfg.head.hidden {
            let hd = hdim as u64;
            params += f * hd + hd;
            flops += 2 * f * hd + hd + hd;
            f = hd;
        }
        let k = cfg.num_classes as u64;
        params += f * k + k;
        flops += 2 * f * k + k;
        (params, flops)
    }

    fn configs() -> Vec<ModelConfig> {
        let base = ModelConfig::vgg_cbam(2, 32, 32, 10);
        vec![
            ModelConfig {
                stage_channels: vec![8, 16],
                cbam: CbamSettings {
                    reduction: 4,
                    kernel: 3,
                    ..Default::default()
                },
                ..base.clone()
            },
            ModelConfig {
                stage_channels: vec![16, 32, 32],
                cbam_stages: Some(vec![0, 2]),
                convs_per_block: 3,
                input_channels: 3,
                ..base.clone()
            },
            ModelConfig {
                stage_channels: vec![4, 8, 8, 16],
                head: HeadConfig {
                    pool: HeadPool::Flatten,
                    hidden: vec![12, 6],
                },
                cbam: CbamSettings {
                    residual: true,
                    ..Default::default()
                },
                input_width: 48,
                ..base.clone()
            },
            ModelConfig {
                stage_channels: vec![6],
                convs_per_block: 1,
                num_classes: 101,
                ..base.clone()
            },
            ModelConfig {
                input_height: 64,
                input_width: 64,
                stage_channels: vec![8, 8, 16, 16, 32],
                ..base
            },
        ]
    }

    #[test]
    fn matches_analytic_oracle() {
        for cfg in configs() {
            let r = profile(&build_model(&cfg, 1).unwrap());
            assert_eq!((r.total_params(), r.total_flops()), analytic(&cfg), "{cfg:?}");
        }
    }

    #[test]
    fn default_model_totals() {
        let cfg = ModelConfig::vgg_cbam(2, 128, 128, 10);
        let r = profile(&build_model(&cfg, 0).unwrap());
        assert_eq!(r.total_params(), 9_493_781);
        assert_eq!(r.total_flops(), 7_319_616_762);
        assert_eq!((r.total_params(), r.total_flops()), analytic(&cfg));
    }

    #[test]
    fn input_channel_delta() {
        let two = profile(&build_model(&ModelConfig::vgg_cbam(2, 128, 128, 10), 0).unwrap());
        let three = profile(&build_model(&ModelConfig::vgg_cbam(3, 128, 128, 10), 0).unwrap());
        let rows = compare(&three, &two);
        let changed: Vec<_> = rows
            .iter()
            .filter(|r| r.param_delta() != 0 || r.flop_delta() != 0)
            .collect();
        assert_eq!(changed.len(), 1);
        assert_eq!(changed[0].name, "stage0.conv0");
        assert_eq!(changed[0].flop_delta(), -(2 * 64 * 9 * 128 * 128));
        assert_eq!(changed[0].param_delta(), -(64 * 9));
        assert!(render_comparison(&three, &two).contains("stage0.conv0"));
    }

    #[test]
    fn original_preset_has_wide_head() {
        let r = profile(&build_model(&ModelConfig::vgg_original(32, 32, 10), 0).unwrap());
        assert_eq!(r.layer("head.fc0").unwrap().params, 512 * 4096 + 4096);
        assert!(r.layer("stage0.cbam.cam").is_none());
        let text = r.render();
        assert!(text.contains("head.classifier"));
    }
}
