//! Run configuration as line-oriented `key = value` text.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::tissue::TileParams;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub tile_size_px: usize,
    pub stride_px: usize,
    pub tile_resolution_um: f64,
    pub mask_resolution_um: f64,
    pub tissue_resolution_um: f64,
    pub min_tissue_fraction: f64,
    pub min_cancer_fraction: f64,
    pub edge_fraction: f64,
    pub edge_area_fraction: f64,
    pub sp_min_area_px: usize,
    pub n_boot: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tile_size_px: 598,
            stride_px: 598,
            tile_resolution_um: 0.454,
            mask_resolution_um: 7.264,
            tissue_resolution_um: 3.64,
            min_tissue_fraction: 0.5,
            min_cancer_fraction: 0.5,
            edge_fraction: 0.10,
            edge_area_fraction: 0.50,
            sp_min_area_px: 4,
            n_boot: 10_000,
            seed: 0,
        }
    }
}

pub const KEYS: [&str; 12] = [
    "tile_size_px",
    "stride_px",
    "tile_resolution_um",
    "mask_resolution_um",
    "tissue_resolution_um",
    "min_tissue_fraction",
    "min_cancer_fraction",
    "edge_fraction",
    "edge_area_fraction",
    "sp_min_area_px",
    "n_boot",
    "seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| invalid(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Sets one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "tile_size_px" => self.tile_size_px = parse(key, v)?,
            "stride_px" => self.stride_px = parse(key, v)?,
            "tile_resolution_um" => self.tile_resolution_um = parse(key, v)?,
            "mask_resolution_um" => self.mask_resolution_um = parse(key, v)?,
            "tissue_resolution_um" => self.tissue_resolution_um = parse(key, v)?,
            "min_tissue_fraction" => self.min_tissue_fraction = parse(key, v)?,
            "min_cancer_fraction" => self.min_cancer_fraction = parse(key, v)?,
            "edge_fraction" => self.edge_fraction = parse(key, v)?,
            "edge_area_fraction" => self.edge_area_fraction = parse(key, v)?,
            "sp_min_area_px" => self.sp_min_area_px = parse(key, v)?,
            "n_boot" => self.n_boot = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(k, v).map_err(|e| invalid(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.tile_params().validate()?;
        for (name, v) in [
            ("mask_resolution_um", self.mask_resolution_um),
            ("tissue_resolution_um", self.tissue_resolution_um),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !(self.edge_fraction > 0.0 && self.edge_fraction < 0.5) {
            return Err(invalid("edge_fraction must lie in (0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.edge_area_fraction) {
            return Err(invalid("edge_area_fraction must lie in [0, 1]"));
        }
        if self.n_boot == 0 {
            return Err(invalid("n_boot must be positive"));
        }
        Ok(())
    }

    pub fn tile_params(&self) -> TileParams {
        TileParams {
            tile_size_px: self.tile_size_px,
            stride_px: self.stride_px,
            tile_resolution_um: self.tile_resolution_um,
            min_tissue_fraction: self.min_tissue_fraction,
            min_cancer_fraction: self.min_cancer_fraction,
        }
    }

    /// Every field as `key = value`, one per line, in declaration order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let values = [
            self.tile_size_px.to_string(),
            self.stride_px.to_string(),
            self.tile_resolution_um.to_string(),
            self.mask_resolution_um.to_string(),
            self.tissue_resolution_um.to_string(),
            self.min_tissue_fraction.to_string(),
            self.min_cancer_fraction.to_string(),
            self.edge_fraction.to_string(),
            self.edge_area_fraction.to_string(),
            self.sp_min_area_px.to_string(),
            self.n_boot.to_string(),
            self.seed.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
