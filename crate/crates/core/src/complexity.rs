//! Exact parameter and multiply-accumulate accounting.
//!
//! Convention: one MAC is one multiply-accumulate, GMAC = 1e9 MACs. Convolutions count every
//! kernel tap including padded ones. Layer norm, softmax, activations, residual adds and
//! concatenations count zero.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::arch::{
    DecoderConv, DecoderReduce, InitialNorm, StoicConfig, TimeConcat, TIME_FEATURES,
};
use crate::error::{Result, StoicError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub path: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ComplexityReport {
    pub rows: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
}

impl ComplexityReport {
    fn push(&mut self, path: impl Into<String>, params: u64, macs: u64) {
        self.total_params += params;
        self.total_macs += macs;
        self.rows.push(LayerCost {
            path: path.into(),
            params,
            macs,
        });
    }

    pub fn gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# 1 MAC = one multiply-accumulate; norms, softmax and activations count 0"
        )?;
        writeln!(f, "{:<28} {:>14} {:>16}", "layer", "params", "macs")?;
        for row in &self.rows {
            writeln!(f, "{:<28} {:>14} {:>16}", row.path, row.params, row.macs)?;
        }
        write!(
            f,
            "{:<28} {:>14} {:>16}  ({:.3} GMAC)",
            "total",
            self.total_params,
            self.total_macs,
            self.gmacs()
        )
    }
}

fn linear_params(d_in: u64, d_out: u64) -> u64 {
    d_in * d_out + d_out
}

fn conv_params(k: u64, c_in: u64, c_out: u64) -> u64 {
    k * k * c_in * c_out + c_out
}

/// Full per-layer report for `batch` images.
fn account(config: &StoicConfig, batch: u64) -> Result<ComplexityReport> {
    config.validate()?;
    let l = config.embed_dim as u64;
    let c = config.image.channels as u64;
    let (h, w) = (config.image.height as u64, config.image.width as u64);
    let (gh, gw) = config.grid();
    let t = (gh * gw) as u64;
    let (k, _, _) = config.stride.geometry();
    let k = k as u64;
    let c_in = config.init_conv_in_channels() as u64;
    let hidden = config.mlp_hidden() as u64;
    let feat = TIME_FEATURES as u64;

    let mut r = ComplexityReport::default();
    r.push(
        "init_conv",
        conv_params(k, c_in, l),
        batch * k * k * c_in * l * t,
    );
    if config.initial_norm == InitialNorm::BatchNorm {
        r.push("init_norm", 2 * l, 0);
    }
    let plane = match config.time_concat {
        TimeConcat::BeforeConv => h * w,
        TimeConcat::AfterConv => t,
    };
    r.push(
        "time_embed",
        linear_params(feat, plane),
        batch * feat * plane,
    );
    if config.time_concat == TimeConcat::AfterConv {
        r.push(
            "time_proj",
            linear_params(l + 1, l),
            batch * t * (l + 1) * l,
        );
    }
    if let Some(ctx) = config.context {
        let (tokens, td) = (ctx.tokens as u64, ctx.token_dim as u64);
        r.push(
            "context_embed",
            linear_params(td, t),
            batch * tokens * td * t,
        );
        r.push(
            "context_proj",
            linear_params(l + tokens, l),
            batch * t * (l + tokens) * l,
        );
    }
    for i in 0..config.num_blocks {
        r.push(format!("block{i}/ln1"), 2 * l, 0);
        r.push(
            format!("block{i}/attn/qkv"),
            linear_params(l, 3 * l),
            batch * t * l * 3 * l,
        );
        r.push(format!("block{i}/attn/scores"), 0, batch * t * t * l);
        r.push(format!("block{i}/attn/values"), 0, batch * t * t * l);
        r.push(
            format!("block{i}/attn/out"),
            linear_params(l, l),
            batch * t * l * l,
        );
        r.push(format!("block{i}/ln2"), 2 * l, 0);
        r.push(
            format!("block{i}/mlp/fc1"),
            linear_params(l, hidden),
            batch * t * l * hidden,
        );
        r.push(
            format!("block{i}/mlp/fc2"),
            linear_params(hidden, l),
            batch * t * hidden * l,
        );
    }
    r.push("decoder/ln", 2 * l, 0);
    if config.decoder_reduce == DecoderReduce::Linear {
        r.push("decoder/reduce", linear_params(l, c), batch * t * l * c);
    }
    let (dk, _, _) = config.decoder_geometry();
    let dk = dk as u64;
    // Conv counts per output position, transposed conv per input position; for both
    // decoder layers this is K²·C²·(positions on the H_o×W_o or H×W side).
    let positions = match config.decoder_conv {
        DecoderConv::Conv => h * w,
        DecoderConv::ConvTranspose => t,
    };
    r.push(
        "decoder/conv",
        conv_params(dk, c, c),
        batch * dk * dk * c * c * positions,
    );
    Ok(r)
}

/// Parameter counts per layer; `macs` columns are zero.
pub fn param_count(config: &StoicConfig) -> Result<ComplexityReport> {
    let mut r = account(config, 0)?;
    r.rows.iter_mut().for_each(|row| row.macs = 0);
    r.total_macs = 0;
    Ok(r)
}

/// Parameters and MACs for a forward pass over `batch` images.
pub fn mac_count(config: &StoicConfig, batch: usize) -> Result<ComplexityReport> {
    account(config, batch as u64)
}

pub const SCALING_HEADER: &str = "stride,L,N,params,gmacs";

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub stride: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub params: u64,
    pub gmacs: f64,
}

pub fn scaling_rows(configs: &[StoicConfig]) -> Result<Vec<ScalingRow>> {
    if configs.is_empty() {
        return Err(StoicError::invalid(
            "scaling_table",
            "no configurations given",
        ));
    }
    configs
        .iter()
        .map(|cfg| {
            let r = mac_count(cfg, 1)?;
            Ok(ScalingRow {
                stride: cfg.stride.stride(),
                embed_dim: cfg.embed_dim,
                num_blocks: cfg.num_blocks,
                params: r.total_params,
                gmacs: r.gmacs(),
            })
        })
        .collect()
}

pub fn scaling_csv(configs: &[StoicConfig]) -> Result<String> {
    let mut out = format!("{SCALING_HEADER}\n");
    for row in scaling_rows(configs)? {
        out.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            row.stride, row.embed_dim, row.num_blocks, row.params, row.gmacs
        ));
    }
    Ok(out)
}

/// Writes one CSV row per configuration.
pub fn scaling_table(configs: &[StoicConfig], path: &Path) -> Result<Vec<ScalingRow>> {
    let rows = scaling_rows(configs)?;
    let csv = scaling_csv(configs)?;
    fs::write(path, csv).map_err(|e| StoicError::io(path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ImageDims, StrideVariant};

    #[test]
    fn unit_formulas() {
        assert_eq!(linear_params(8, 4), 36);
        assert_eq!(conv_params(2, 3, 64), 832);
        let cfg = StoicConfig::new(StrideVariant::S1, ImageDims::new(3, 32, 32), 64, 1);
        let r = mac_count(&cfg, 1).unwrap();
        assert_eq!(r.rows[0].macs, 1_769_472);
    }

    #[test]
    fn totals_are_row_sums() {
        let cfg =
            StoicConfig::new(StrideVariant::S2, ImageDims::new(3, 16, 16), 64, 3).with_context(32);
        let r = mac_count(&cfg, 2).unwrap();
        assert_eq!(r.total_params, r.rows.iter().map(|x| x.params).sum::<u64>());
        assert_eq!(r.total_macs, r.rows.iter().map(|x| x.macs).sum::<u64>());
        assert_eq!(param_count(&cfg).unwrap().total_params, r.total_params);
        assert_eq!(mac_count(&cfg, 1).unwrap().total_macs * 2, r.total_macs);
    }

    #[test]
    fn csv_shape_and_errors() {
        assert!(scaling_csv(&[]).is_err());
        let a = StoicConfig::new(StrideVariant::S2, ImageDims::new(3, 32, 32), 256, 12);
        let b = StoicConfig::new(StrideVariant::S2, ImageDims::new(3, 32, 32), 256, 24);
        let csv = scaling_csv(&[a, b]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], SCALING_HEADER);
        assert!(lines[1].starts_with("2,256,12,"));
        assert!(!csv.contains('\r'));
    }
}
