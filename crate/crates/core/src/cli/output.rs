//! Result files: line-delimited JSON records, the model file and the
//! retention plot.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::diffcore::{ParamVector, Tensor};
use crate::error::{Error, Result};
use crate::eval::RetentionProfile;
use crate::setfn::{Architecture, SetFunctionModel};

/// Version stamped on every record and on the model file.
pub const OUTPUT_VERSION: u32 = 1;

/// Writes one JSON object per line, adding `version` and `kind`.
pub fn write_jsonl(path: &Path, records: &[(&str, Value)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (kind, value) in records {
        let mut obj = match value {
            Value::Object(m) => m.clone(),
            other => {
                let mut m = serde_json::Map::new();
                m.insert("value".into(), other.clone());
                m
            }
        };
        obj.insert("version".into(), json!(OUTPUT_VERSION));
        obj.insert("kind".into(), json!(kind));
        serde_json::to_writer(&mut w, &obj).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Value>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct ModelFileOut<'a> {
    format_version: u32,
    arch: Architecture,
    segments: Vec<SegmentOut<'a>>,
}

#[derive(Serialize)]
struct SegmentOut<'a> {
    name: &'a str,
    shape: &'a [usize],
    data: &'a [f64],
}

#[derive(Deserialize)]
struct ModelFileIn {
    format_version: u32,
    arch: Architecture,
    segments: Vec<Value>,
}

#[derive(Deserialize)]
struct SegmentIn {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn save_model(model: &SetFunctionModel, path: &Path) -> Result<()> {
    let file = ModelFileOut {
        format_version: OUTPUT_VERSION,
        arch: *model.arch(),
        segments: model
            .params()
            .segments()
            .iter()
            .map(|s| SegmentOut {
                name: &s.name,
                shape: s.value.shape(),
                data: s.value.data(),
            })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &file).map_err(|e| Error::Format(e.to_string()))?;
    w.flush()?;
    Ok(())
}

/// Loads a model; errors name the offending segment.
pub fn load_model(path: &Path) -> Result<SetFunctionModel> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFileIn = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("model file {}: {e}", path.display())))?;
    if file.format_version != OUTPUT_VERSION {
        return Err(Error::Format(format!(
            "model format version {} is not supported (expected {OUTPUT_VERSION})",
            file.format_version
        )));
    }
    let mut segments = Vec::with_capacity(file.segments.len());
    for (i, raw) in file.segments.into_iter().enumerate() {
        let label = raw
            .get("name")
            .and_then(Value::as_str)
            .map_or_else(|| format!("#{i}"), |n| format!("`{n}`"));
        let seg: SegmentIn = serde_json::from_value(raw)
            .map_err(|e| Error::Format(format!("segment {label}: {e}")))?;
        let tensor = Tensor::new(seg.shape, seg.data)
            .map_err(|e| Error::Format(format!("segment {label}: {e}")))?;
        segments.push((seg.name, tensor));
    }
    SetFunctionModel::from_params(file.arch, ParamVector::new(segments)?)
}

/// Line plot of mean retained bytes against K, one series per mode.
pub fn retention_svg(profile: &RetentionProfile) -> String {
    let (w, h, pad) = (640.0, 400.0, 60.0);
    let kmax = *profile.k.last().unwrap_or(&1) as f64;
    let ymax = profile
        .unrolled
        .iter()
        .chain(&profile.implicit)
        .map(|s| s.max)
        .fold(1.0, f64::max);
    let x = |k: usize| pad + (w - 2.0 * pad) * k as f64 / kmax;
    let y = |b: f64| h - pad - (h - 2.0 * pad) * b / ymax;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\">fixed-point iterations K</text>\n\
         <text x=\"15\" y=\"{cy}\" transform=\"rotate(-90 15 {cy})\" text-anchor=\"middle\">retained MiB</text>\n",
        b = h - pad,
        r = w - pad,
        cx = w / 2.0,
        ty = h - 20.0,
        cy = h / 2.0,
    );
    for &k in &profile.k {
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{k}</text>\n",
            x(k),
            h - pad + 16.0
        );
    }
    for frac in [0.0, 0.5, 1.0] {
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.1}</text>\n",
            pad - 6.0,
            y(frac * ymax) + 4.0,
            frac * ymax / (1024.0 * 1024.0)
        );
    }
    for (i, (label, series, color)) in [
        ("unrolled", &profile.unrolled, "#d62728"),
        ("implicit", &profile.implicit, "#1f77b4"),
    ]
    .into_iter()
    .enumerate()
    {
        let pts: Vec<String> = profile
            .k
            .iter()
            .zip(series.iter())
            .map(|(&k, s)| format!("{:.1},{:.1}", x(k), y(s.mean)))
            .collect();
        svg += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        );
        for p in &pts {
            let (px, py) = p.split_once(',').expect("formatted point");
            svg += &format!("<circle cx=\"{px}\" cy=\"{py}\" r=\"3\" fill=\"{color}\"/>\n");
        }
        let ly = pad + 18.0 * i as f64;
        svg += &format!(
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{lx2}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\
             <text x=\"{tx}\" y=\"{ty}\">{label}</text>\n",
            lx = pad + 10.0,
            lx2 = pad + 30.0,
            tx = pad + 36.0,
            ty = ly + 4.0
        );
    }
    svg + "</svg>\n"
}
