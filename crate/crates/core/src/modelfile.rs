//! Text persistence for trained models.
//!
//! Line-oriented UTF-8: each line is a field name followed by
//! space-separated values. Every `f64` is written as the 16 hex digits of
//! its bit pattern, so a save/load round trip is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::data::{LabelMap, Standardizer};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, RbfCenters, RbfMapParams};
use crate::linsvm::{BinarySvm, OvaSvm};
use crate::trainer::{
    Basis, Collapsed, InitStrategy, MacConfig, Sigma, StopReason, TrainedModel, TrainingSummary,
};

pub const MAGIC: &str = "macsvm-model";
pub const FORMAT_VERSION: u32 = 1;

/// A trained model together with the input preprocessing and label names
/// needed to apply it to raw files.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: TrainedModel,
    pub standardizer: Option<Standardizer>,
    pub labels: LabelMap,
}

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn hex_row<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    values.into_iter().map(|&v| hex(v)).collect::<Vec<_>>().join(" ")
}

fn line(out: &mut String, key: &str, value: impl std::fmt::Display) {
    writeln!(out, "{key} {value}").expect("writing to a String");
}

fn write_matrix(out: &mut String, key: &str, m: &DMatrix<f64>) {
    line(out, key, format!("{} {}", m.nrows(), m.ncols()));
    for row in m.row_iter() {
        line(out, "row", hex_row(row.iter()));
    }
}

impl ModelFile {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let model = &self.model;
        let map = &model.map;
        out.push_str(MAGIC);
        out.push('\n');
        line(&mut out, "format_version", FORMAT_VERSION);
        line(&mut out, "classes", model.svms.class_count());
        line(&mut out, "latent_dim", map.latent_dim());
        line(&mut out, "input_dim", map.features.input_dim());
        line(&mut out, "basis_count", map.features.basis_count());
        for name in &self.labels.names {
            line(&mut out, "label", name);
        }
        match &self.standardizer {
            None => line(&mut out, "standardizer", "none"),
            Some(s) => {
                line(&mut out, "standardizer", "affine");
                line(&mut out, "mean", hex_row(&s.mean));
                line(&mut out, "scale", hex_row(&s.scale));
            }
        }
        match &map.features {
            FeatureMap::Linear { .. } => line(&mut out, "basis", "linear"),
            FeatureMap::Rbf(c) => {
                line(&mut out, "basis", "rbf");
                line(&mut out, "sigma", hex(c.sigma));
                write_matrix(&mut out, "centers", &c.centers);
            }
        }
        line(&mut out, "lambda", hex(map.lambda));
        write_matrix(&mut out, "w", &map.w);
        for m in &model.svms.machines {
            line(&mut out, "svm", format!("{} {} {}", hex(m.c), hex(m.b), hex_row(m.w.iter())));
        }
        write_matrix(&mut out, "collapsed_v", &model.collapsed.v);
        line(&mut out, "collapsed_b", hex_row(&model.collapsed.b));
        write_config(&mut out, &model.summary.config);
        let s = &model.summary;
        line(&mut out, "stop_reason", s.stop_reason.as_str());
        line(&mut out, "stages", s.stages);
        line(&mut out, "iterations", s.iterations);
        line(&mut out, "selected_stage", s.selected_stage);
        out.push_str("end\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Reader::new(text);
        let magic = r.next_line()?;
        if magic.trim_end() != MAGIC {
            return Err(r.error("not a macsvm model file"));
        }
        let version: u32 = r.scalar("format_version")?;
        if version != FORMAT_VERSION {
            return Err(r.error(&format!(
                "unsupported format_version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let k: usize = r.scalar("classes")?;
        let l: usize = r.scalar("latent_dim")?;
        let d: usize = r.scalar("input_dim")?;
        let m: usize = r.scalar("basis_count")?;
        let mut names = Vec::with_capacity(k);
        for _ in 0..k {
            names.push(r.raw("label")?.to_string());
        }
        let standardizer = match r.raw("standardizer")? {
            "none" => None,
            "affine" => {
                let mean = r.floats("mean", d)?;
                let scale = r.floats("scale", d)?;
                Some(Standardizer { mean, scale })
            }
            other => return Err(r.error(&format!("unknown standardizer {other:?}"))),
        };
        let features = match r.raw("basis")? {
            "linear" => {
                if m != d {
                    return Err(r.error("linear basis needs basis_count == input_dim"));
                }
                FeatureMap::Linear { dim: d }
            }
            "rbf" => {
                let sigma = r.float("sigma")?;
                let centers = r.matrix("centers", m, d)?;
                FeatureMap::Rbf(RbfCenters::new(centers, sigma).map_err(|e| r.error(&e.to_string()))?)
            }
            other => return Err(r.error(&format!("unknown basis {other:?}"))),
        };
        let lambda = r.float("lambda")?;
        let w = r.matrix("w", l, m)?;
        let map = RbfMapParams::new(features, w, lambda).map_err(|e| r.error(&e.to_string()))?;
        let mut machines = Vec::with_capacity(k);
        for _ in 0..k {
            let v = r.floats("svm", l + 2)?;
            machines.push(BinarySvm {
                c: v[0],
                b: v[1],
                w: DVector::from_column_slice(&v[2..]),
            });
        }
        let v = r.matrix("collapsed_v", k, m)?;
        let b = r.floats("collapsed_b", k)?;
        let config = read_config(&mut r)?;
        let stop_reason = match r.raw("stop_reason")? {
            "validation-plateau" => StopReason::ValidationPlateau,
            "stages-exhausted" => StopReason::StagesExhausted,
            "budget" => StopReason::Budget,
            other => return Err(r.error(&format!("unknown stop_reason {other:?}"))),
        };
        let stages = r.scalar("stages")?;
        let iterations = r.scalar("iterations")?;
        let selected_stage = r.scalar("selected_stage")?;
        if r.next_line()?.trim_end() != "end" {
            return Err(r.error("expected end"));
        }
        let model = TrainedModel {
            map,
            svms: OvaSvm { machines },
            collapsed: Collapsed { v, b },
            summary: TrainingSummary {
                config,
                stop_reason,
                stages,
                iterations,
                selected_stage,
            },
        };
        Ok(ModelFile {
            model,
            standardizer,
            labels: LabelMap { names },
        })
    }

    /// Applies the stored standardization (if any) to raw inputs.
    pub fn prepare(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = self.model.map.features.input_dim();
        if x.ncols() != d {
            return Err(crate::error::invalid(format!(
                "data has {} features, model expects {d}",
                x.ncols()
            )));
        }
        match &self.standardizer {
            Some(s) => s.apply(x),
            None => Ok(x.clone()),
        }
    }
}

fn write_config(out: &mut String, cfg: &MacConfig) {
    match cfg.basis {
        Basis::Rbf { centers } => line(out, "cfg.basis", format!("rbf {centers}")),
        Basis::Linear => line(out, "cfg.basis", "linear"),
    }
    match cfg.sigma {
        Sigma::Auto => line(out, "cfg.sigma", "auto"),
        Sigma::Fixed(s) => line(out, "cfg.sigma", hex(s)),
    }
    match &cfg.class_c {
        None => line(out, "cfg.class_c", "none"),
        Some(cs) => line(out, "cfg.class_c", hex_row(cs)),
    }
    let init = match cfg.init {
        InitStrategy::Random => "random",
        InitStrategy::Simplex => "simplex",
    };
    line(out, "cfg.init", init);
    line(out, "cfg.latent_dim", cfg.latent_dim);
    line(out, "cfg.lambda", hex(cfg.lambda));
    line(out, "cfg.c", hex(cfg.c));
    line(out, "cfg.mu0", hex(cfg.mu0));
    line(out, "cfg.mu_factor", hex(cfg.mu_factor));
    line(out, "cfg.mu_max_stages", cfg.mu_max_stages);
    line(out, "cfg.inner_tol", hex(cfg.inner_tol));
    line(out, "cfg.inner_max_iters", cfg.inner_max_iters);
    line(out, "cfg.simplex_scale", hex(cfg.simplex_scale));
    line(out, "cfg.patience", cfg.patience);
    line(out, "cfg.seed", cfg.seed);
    line(out, "cfg.svm_tol", hex(cfg.svm_tol));
    line(out, "cfg.svm_max_epochs", cfg.svm_max_epochs);
    line(out, "cfg.z_tol", hex(cfg.z_tol));
    line(out, "cfg.kmeans_iters", cfg.kmeans_iters);
}

fn read_config(r: &mut Reader) -> Result<MacConfig> {
    let basis = match r.raw("cfg.basis")? {
        "linear" => Basis::Linear,
        s => match s.strip_prefix("rbf ") {
            Some(n) => Basis::Rbf {
                centers: n.parse().map_err(|_| r.error("bad center count"))?,
            },
            None => return Err(r.error(&format!("unknown basis {s:?}"))),
        },
    };
    let sigma = match r.raw("cfg.sigma")? {
        "auto" => Sigma::Auto,
        s => Sigma::Fixed(r.parse_hex(s)?),
    };
    let class_c = match r.raw("cfg.class_c")? {
        "none" => None,
        s => Some(
            s.split(' ')
                .map(|t| r.parse_hex(t))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let init = match r.raw("cfg.init")? {
        "random" => InitStrategy::Random,
        "simplex" => InitStrategy::Simplex,
        other => return Err(r.error(&format!("unknown init {other:?}"))),
    };
    Ok(MacConfig {
        basis,
        sigma,
        class_c,
        init,
        latent_dim: r.scalar("cfg.latent_dim")?,
        lambda: r.float("cfg.lambda")?,
        c: r.float("cfg.c")?,
        mu0: r.float("cfg.mu0")?,
        mu_factor: r.float("cfg.mu_factor")?,
        mu_max_stages: r.scalar("cfg.mu_max_stages")?,
        inner_tol: r.float("cfg.inner_tol")?,
        inner_max_iters: r.scalar("cfg.inner_max_iters")?,
        simplex_scale: r.float("cfg.simplex_scale")?,
        patience: r.scalar("cfg.patience")?,
        seed: r.scalar("cfg.seed")?,
        svm_tol: r.float("cfg.svm_tol")?,
        svm_max_epochs: r.scalar("cfg.svm_max_epochs")?,
        z_tol: r.float("cfg.z_tol")?,
        kmeans_iters: r.scalar("cfg.kmeans_iters")?,
    })
}

struct Reader<'a> {
    lines: std::str::Lines<'a>,
    lineno: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines(),
            lineno: 0,
        }
    }

    fn error(&self, msg: &str) -> Error {
        Error::ModelFormat(format!("line {}: {msg}", self.lineno))
    }

    fn next_line(&mut self) -> Result<&'a str> {
        self.lineno += 1;
        self.lines
            .next()
            .ok_or_else(|| self.error("unexpected end of file"))
    }

    /// Everything after `key ` on the next line.
    fn raw(&mut self, key: &str) -> Result<&'a str> {
        let text = self.next_line()?;
        match text.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest),
            _ => Err(self.error(&format!("expected {key}"))),
        }
    }

    fn scalar<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| self.error(&format!("bad value {v:?} for {key}")))
    }

    fn parse_hex(&self, token: &str) -> Result<f64> {
        if token.len() != 16 {
            return Err(self.error(&format!("bad float {token:?}")));
        }
        u64::from_str_radix(token, 16)
            .map(f64::from_bits)
            .map_err(|_| self.error(&format!("bad float {token:?}")))
    }

    fn float(&mut self, key: &str) -> Result<f64> {
        let v = self.raw(key)?;
        self.parse_hex(v)
    }

    fn floats(&mut self, key: &str, count: usize) -> Result<Vec<f64>> {
        let v = self.raw(key)?;
        let out = v
            .split(' ')
            .map(|t| self.parse_hex(t))
            .collect::<Result<Vec<_>>>()?;
        if out.len() != count {
            return Err(self.error(&format!("{key}: expected {count} values, got {}", out.len())));
        }
        Ok(out)
    }

    fn matrix(&mut self, key: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let shape = self.raw(key)?;
        if shape != format!("{rows} {cols}") {
            return Err(self.error(&format!("{key}: expected shape {rows} {cols}, got {shape}")));
        }
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            let row = self.floats("row", cols)?;
            for (j, v) in row.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_spirals;
    use crate::trainer::train_mac;

    fn small_model() -> ModelFile {
        let ds = gen_spirals(3, 30, 0.025, 1.0, 1).unwrap();
        let cfg = MacConfig {
            basis: Basis::Rbf { centers: 12 },
            sigma: Sigma::Fixed(0.3),
            mu_max_stages: 2,
            class_c: Some(vec![1.0, 2.0, 0.5]),
            ..Default::default()
        };
        let (model, _) = train_mac(&cfg, &ds, None).unwrap();
        ModelFile {
            model,
            standardizer: Some(Standardizer::fit(&ds.x)),
            labels: LabelMap {
                names: vec!["a".into(), "b c".into(), "-1".into()],
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let file = small_model();
        let text = file.to_text();
        let back = ModelFile::parse(&text).unwrap();
        let bits = |m: &DMatrix<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.model.map.w), bits(&file.model.map.w));
        assert_eq!(bits(&back.model.collapsed.v), bits(&file.model.collapsed.v));
        assert_eq!(back, file);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn special_values_survive() {
        for v in [0.0, -0.0, f64::MIN_POSITIVE, 1e-310, f64::MAX, 0.1 + 0.2] {
            let text = hex(v);
            let r = Reader::new("");
            assert_eq!(r.parse_hex(&text).unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn linear_model_round_trip() {
        let ds = gen_spirals(2, 20, 0.025, 1.0, 2).unwrap();
        let cfg = MacConfig {
            basis: Basis::Linear,
            latent_dim: 1,
            mu_max_stages: 1,
            ..Default::default()
        };
        let (model, _) = train_mac(&cfg, &ds, None).unwrap();
        let file = ModelFile {
            model,
            standardizer: None,
            labels: LabelMap {
                names: vec!["0".into(), "1".into()],
            },
        };
        assert_eq!(ModelFile::parse(&file.to_text()).unwrap(), file);
    }

    #[test]
    fn version_mismatch_rejected() {
        let text = small_model().to_text().replace("format_version 1", "format_version 2");
        match ModelFile::parse(&text) {
            Err(Error::ModelFormat(msg)) => assert!(msg.contains("format_version 2"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corruption_rejected() {
        let text = small_model().to_text();
        assert!(ModelFile::parse("garbage\n").is_err());
        assert!(ModelFile::parse(&text[..text.len() / 2]).is_err());
        let bad = text.replacen("lambda ", "lambda zz", 1);
        assert!(matches!(ModelFile::parse(&bad), Err(Error::ModelFormat(_))));
    }
}
