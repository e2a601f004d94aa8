//! Line-oriented text format for trained predictors.
//!
//! ```text
//! phri-predictor 1
//! [meta]
//! version_tag <tag>
//! [config]
//! dof 2
//! ...
//! [normalization]
//! input_mean <values>
//! ...
//! [blocks]
//! block <name> <rows> <cols> <frozen|trainable>
//! <one line per row>
//! ...
//! [end]
//! ```
//!
//! Floats use the shortest decimal that round-trips exactly.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use super::model::{Normalization, ParamBlock, PredictorConfig, PredictorModel};
use crate::error::NetError;

pub const FORMAT_MAGIC: &str = "phri-predictor";
pub const FORMAT_VERSION: u32 = 1;

const SECTIONS: [&str; 5] = ["meta", "config", "normalization", "blocks", "end"];

fn join(values: impl IntoIterator<Item = f64>) -> String {
    let mut s = String::new();
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{v:?}").unwrap();
    }
    s
}

pub fn to_text(model: &PredictorModel) -> String {
    let c = &model.config;
    let n = &model.norm;
    let mut out = String::new();
    writeln!(out, "{FORMAT_MAGIC} {FORMAT_VERSION}").unwrap();
    writeln!(out, "[meta]").unwrap();
    writeln!(out, "version_tag {}", model.version_tag).unwrap();
    writeln!(out, "[config]").unwrap();
    for (k, v) in [
        ("dof", c.dof),
        ("input_features", c.input_features),
        ("window_k", c.window_k),
        ("horizon_n", c.horizon_n),
        ("recurrent_layers", c.recurrent_layers),
        ("hidden_size", c.hidden_size),
        ("fc_hidden", c.fc_hidden),
        ("output_size", c.output_size),
    ] {
        writeln!(out, "{k} {v}").unwrap();
    }
    writeln!(out, "[normalization]").unwrap();
    writeln!(out, "input_mean {}", join(n.input_mean.iter().copied())).unwrap();
    writeln!(out, "input_scale {}", join(n.input_scale.iter().copied())).unwrap();
    writeln!(out, "output_mean {}", join(n.output_mean.iter().copied())).unwrap();
    writeln!(out, "output_scale {}", join(n.output_scale.iter().copied())).unwrap();
    writeln!(out, "[blocks]").unwrap();
    for b in &model.blocks {
        let flag = if b.frozen { "frozen" } else { "trainable" };
        writeln!(out, "block {} {} {} {flag}", b.name, b.value.nrows(), b.value.ncols()).unwrap();
        for r in 0..b.value.nrows() {
            writeln!(out, "{}", join(b.value.row(r).iter().copied())).unwrap();
        }
    }
    writeln!(out, "[end]").unwrap();
    out
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            let l = l.trim();
            if !l.is_empty() {
                return Some((i + 1, l));
            }
        }
        None
    }

    fn peek_is_section(&mut self) -> bool {
        while let Some((_, l)) = self.inner.peek() {
            if l.trim().is_empty() {
                self.inner.next();
            } else {
                return l.trim().starts_with('[');
            }
        }
        true
    }

    fn section(&mut self, name: &str) -> Result<(), NetError> {
        match self.next() {
            None => Err(NetError::MissingSection(name.into())),
            Some((_, l)) if l == format!("[{name}]") => Ok(()),
            Some((line, l)) => {
                // a later section in place of this one means this one is missing
                let found = l.trim_start_matches('[').trim_end_matches(']');
                if l.starts_with('[') && SECTIONS.contains(&found) {
                    Err(NetError::MissingSection(name.into()))
                } else {
                    Err(parse_err(line, format!("expected [{name}], found {l:?}")))
                }
            }
        }
    }

    fn key_value(&mut self, section: &str, key: &str) -> Result<(usize, &'a str), NetError> {
        let (line, l) = self.next().ok_or_else(|| NetError::MissingSection(section.into()))?;
        let (k, v) = l.split_once(' ').unwrap_or((l, ""));
        if k != key {
            return Err(parse_err(line, format!("expected key {key}, found {k:?}")));
        }
        Ok((line, v.trim()))
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> NetError {
    NetError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_floats(line: usize, s: &str) -> Result<Vec<f64>, NetError> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| parse_err(line, format!("bad number {t:?}: {e}")))
        })
        .collect()
}

fn parse_usize(line: usize, s: &str) -> Result<usize, NetError> {
    s.parse()
        .map_err(|e| parse_err(line, format!("bad integer {s:?}: {e}")))
}

pub fn from_text(text: &str) -> Result<PredictorModel, NetError> {
    let mut lines = Lines {
        inner: text.lines().enumerate().peekable(),
    };
    let (line, header) = lines.next().ok_or_else(|| NetError::MissingSection("header".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(FORMAT_MAGIC) {
        return Err(parse_err(line, "not a predictor file"));
    }
    let found: u32 = parts
        .next()
        .ok_or_else(|| parse_err(line, "missing format version"))?
        .parse()
        .map_err(|_| parse_err(line, "bad format version"))?;
    if found != FORMAT_VERSION {
        return Err(NetError::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }

    lines.section("meta")?;
    let (_, version_tag) = lines.key_value("meta", "version_tag")?;
    let version_tag = version_tag.to_string();

    lines.section("config")?;
    let mut vals = [0usize; 8];
    for (slot, key) in vals.iter_mut().zip([
        "dof",
        "input_features",
        "window_k",
        "horizon_n",
        "recurrent_layers",
        "hidden_size",
        "fc_hidden",
        "output_size",
    ]) {
        let (line, v) = lines.key_value("config", key)?;
        *slot = parse_usize(line, v)?;
    }
    let config = PredictorConfig {
        dof: vals[0],
        input_features: vals[1],
        window_k: vals[2],
        horizon_n: vals[3],
        recurrent_layers: vals[4],
        hidden_size: vals[5],
        fc_hidden: vals[6],
        output_size: vals[7],
    };
    config.validate()?;

    lines.section("normalization")?;
    let mut norm_vals: Vec<Vec<f64>> = Vec::with_capacity(4);
    for key in ["input_mean", "input_scale", "output_mean", "output_scale"] {
        let (line, v) = lines.key_value("normalization", key)?;
        norm_vals.push(parse_floats(line, v)?);
    }
    let mut it = norm_vals.into_iter();
    let norm = Normalization {
        input_mean: it.next().unwrap(),
        input_scale: it.next().unwrap(),
        output_mean: it.next().unwrap(),
        output_scale: it.next().unwrap(),
    };

    lines.section("blocks")?;
    let mut blocks = Vec::new();
    while !lines.peek_is_section() {
        let (line, l) = lines.next().unwrap();
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 5 || f[0] != "block" {
            return Err(parse_err(line, format!("expected block header, found {l:?}")));
        }
        let rows = parse_usize(line, f[2])?;
        let cols = parse_usize(line, f[3])?;
        let frozen = match f[4] {
            "frozen" => true,
            "trainable" => false,
            other => return Err(parse_err(line, format!("bad freeze flag {other:?}"))),
        };
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let (line, l) = lines.next().ok_or_else(|| NetError::MissingSection("end".into()))?;
            let row = parse_floats(line, l)?;
            if row.len() != cols {
                return Err(NetError::Shape {
                    what: format!("{} row {r} values", f[1]),
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend(row);
        }
        blocks.push(ParamBlock {
            name: f[1].to_string(),
            value: DMatrix::from_row_slice(rows, cols, &data),
            frozen,
        });
    }
    lines.section("end")?;

    let model = PredictorModel {
        config,
        blocks,
        norm,
        version_tag,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &PredictorModel, path: &Path) -> Result<(), NetError> {
    std::fs::write(path, to_text(model)).map_err(|source| NetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<PredictorModel, NetError> {
    let text = std::fs::read_to_string(path).map_err(|source| NetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_text(&text)
}
