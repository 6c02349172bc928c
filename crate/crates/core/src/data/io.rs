//! Feature files.
//!
//! Text format: a header line
//! `dca-features v1 input_dim=<d> n_views=<v>` followed by one record per
//! line, `<modality>,<class-name>,<split>,<view-index>,<d values>`. A shape
//! occupies `n_views` consecutive lines with view indices `0..n_views`;
//! sketches use view index 0. Class labels are assigned in order of first
//! appearance.
//!
//! The binary twin stores the same content in the checksummed container
//! used for checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use super::{Dataset, Modality, Sample, Split};
use crate::container::{Reader, Writer};
use crate::error::{DcaError, Result};
use crate::tensor::Tensor;

pub const FEATURE_HEADER: &str = "dca-features v1";
const BINARY_MAGIC: &[u8; 4] = b"DCAF";
const BINARY_VERSION: u32 = 1;

fn parse_err(line: usize, msg: impl Into<String>) -> DcaError {
    DcaError::Parse { line, msg: msg.into() }
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let rest = line
        .strip_prefix(FEATURE_HEADER)
        .ok_or_else(|| parse_err(1, format!("expected header `{FEATURE_HEADER} input_dim=<d> n_views=<v>`")))?;
    let mut input_dim = None;
    let mut n_views = None;
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| parse_err(1, format!("malformed header field `{field}`")))?;
        let value: usize = value
            .parse()
            .map_err(|_| parse_err(1, format!("header field `{key}` is not an integer")))?;
        match key {
            "input_dim" => input_dim = Some(value),
            "n_views" => n_views = Some(value),
            other => return Err(parse_err(1, format!("unknown header field `{other}`"))),
        }
    }
    match (input_dim, n_views) {
        (Some(d), Some(v)) if d > 0 && v > 0 => Ok((d, v)),
        _ => Err(parse_err(1, "header needs positive input_dim and n_views")),
    }
}

struct PendingShape {
    id: usize,
    line: usize,
    label: usize,
    class: String,
    split: Split,
    rows: Vec<f64>,
    views: usize,
}

/// Parses the text feature format. Any malformed line aborts with its
/// 1-based line number.
pub fn read_features(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let (input_dim, n_views) = parse_header(header)?;

    let mut class_names: Vec<String> = Vec::new();
    let mut samples = Vec::new();
    let mut pending: Option<PendingShape> = None;
    let mut shape_count = 0;

    let close = |pending: PendingShape, samples: &mut Vec<Sample>| -> Result<()> {
        if pending.views != n_views {
            return Err(parse_err(
                pending.line,
                format!(
                    "shape #{} (class `{}`) has {} of {n_views} views",
                    pending.id, pending.class, pending.views
                ),
            ));
        }
        samples.push(Sample {
            modality: Modality::Shape,
            label: pending.label,
            split: pending.split,
            features: Tensor::new(vec![n_views, input_dim], pending.rows)?,
        });
        Ok(())
    };

    for (no, line) in lines {
        if line.is_empty() {
            return Err(parse_err(no, "empty line"));
        }
        let mut fields = line.split(',');
        let mut next = |what: &str| fields.next().ok_or_else(|| parse_err(no, format!("missing {what}")));
        let modality = match next("modality")? {
            "sketch" => Modality::Sketch,
            "shape" => Modality::Shape,
            other => return Err(parse_err(no, format!("unknown modality `{other}`"))),
        };
        let class = next("class name")?.to_string();
        if class.is_empty() {
            return Err(parse_err(no, "empty class name"));
        }
        let split = match next("split")? {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(parse_err(no, format!("unknown split `{other}`"))),
        };
        let view: usize = next("view index")?
            .parse()
            .map_err(|_| parse_err(no, "view index is not an integer"))?;
        let values: Vec<f64> = fields
            .map(|v| v.parse::<f64>().map_err(|_| parse_err(no, format!("bad value `{v}`"))))
            .collect::<Result<_>>()?;
        if values.len() != input_dim {
            return Err(parse_err(no, format!("{} values, expected input_dim={input_dim}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(no, "non-finite value"));
        }
        let label = match class_names.iter().position(|c| *c == class) {
            Some(l) => l,
            None => {
                class_names.push(class.clone());
                class_names.len() - 1
            }
        };

        let continues_shape = modality == Modality::Shape && view > 0;
        if !continues_shape {
            if let Some(p) = pending.take() {
                close(p, &mut samples)?;
            }
        }
        match modality {
            Modality::Sketch => {
                if view != 0 {
                    return Err(parse_err(no, "sketch records must use view index 0"));
                }
                samples.push(Sample {
                    modality,
                    label,
                    split,
                    features: Tensor::new(vec![1, input_dim], values)?,
                });
            }
            Modality::Shape if view == 0 => {
                shape_count += 1;
                pending = Some(PendingShape {
                    id: shape_count,
                    line: no,
                    label,
                    class,
                    split,
                    rows: values,
                    views: 1,
                });
            }
            Modality::Shape => {
                let p = pending
                    .as_mut()
                    .ok_or_else(|| parse_err(no, format!("view {view} without a preceding view 0")))?;
                if view != p.views {
                    return Err(parse_err(
                        no,
                        format!("shape #{}: expected view {}, found {view}", p.id, p.views),
                    ));
                }
                if label != p.label || split != p.split {
                    return Err(parse_err(no, format!("shape #{}: class or split changes between views", p.id)));
                }
                if view >= n_views {
                    return Err(parse_err(no, format!("shape #{}: more than {n_views} views", p.id)));
                }
                p.rows.extend(values);
                p.views += 1;
            }
        }
    }
    if let Some(p) = pending.take() {
        close(p, &mut samples)?;
    }
    let dataset = Dataset {
        input_dim,
        n_views,
        class_names,
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Serializes to the canonical text form. Values use the shortest decimal
/// that parses back to the same double.
pub fn write_features(dataset: &Dataset) -> String {
    let mut out = format!(
        "{FEATURE_HEADER} input_dim={} n_views={}\n",
        dataset.input_dim, dataset.n_views
    );
    for s in &dataset.samples {
        let class = &dataset.class_names[s.label];
        for v in 0..s.features.rows() {
            let _ = write!(out, "{},{},{},{}", s.modality.tag(), class, s.split.tag(), v);
            for x in s.features.row(v) {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_features_binary(dataset: &Dataset) -> Vec<u8> {
    let mut w = Writer::new(BINARY_MAGIC, BINARY_VERSION);
    w.u64(dataset.input_dim as u64);
    w.u64(dataset.n_views as u64);
    w.u64(dataset.class_names.len() as u64);
    for c in &dataset.class_names {
        w.str(c);
    }
    w.u64(dataset.samples.len() as u64);
    for s in &dataset.samples {
        w.u8(matches!(s.modality, Modality::Shape) as u8);
        w.u8(matches!(s.split, Split::Test) as u8);
        w.u64(s.label as u64);
        w.tensor(&s.features);
    }
    w.finish()
}

pub fn read_features_binary(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, BINARY_MAGIC, BINARY_VERSION)?;
    let input_dim = r.u64()? as usize;
    let n_views = r.u64()? as usize;
    let n_classes = r.u64()? as usize;
    let class_names = (0..n_classes).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let n = r.u64()? as usize;
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let modality = if r.u8()? == 1 { Modality::Shape } else { Modality::Sketch };
        let split = if r.u8()? == 1 { Split::Test } else { Split::Train };
        let label = r.u64()? as usize;
        let features = r.tensor()?;
        samples.push(Sample {
            modality,
            label,
            split,
            features,
        });
    }
    r.finish()?;
    let dataset = Dataset {
        input_dim,
        n_views,
        class_names,
        samples,
    };
    dataset.validate().map_err(|e| DcaError::Integrity(e.to_string()))?;
    Ok(dataset)
}

/// Loads a feature file, choosing the binary reader when the file starts
/// with the binary magic.
pub fn load_features(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| DcaError::io(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        return read_features_binary(&bytes);
    }
    let text = String::from_utf8(bytes).map_err(|_| parse_err(1, "file is neither utf-8 text nor binary features"))?;
    read_features(&text)
}
