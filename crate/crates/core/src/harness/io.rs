//! CSV rendering and parsing, and atomic file output.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! file parses back to the exact values that produced it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::{AgreementReport, ExperimentConfig, HarnessError, MapEntry, Result};
use crate::embedding::{MeasurementSegment, MeasurementSeries};
use crate::geometry::RelativeLocation;
use crate::sensors::Truncation;
use crate::world::WorldTrajectory;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFile {
    pub name: String,
    pub contents: String,
}

impl OutputFile {
    pub fn new(name: impl Into<String>, contents: impl Into<String>) -> Self {
        OutputFile {
            name: name.into(),
            contents: contents.into(),
        }
    }
}

/// Writes each file to `dir` through a temporary file and a rename, so a
/// reader never sees a partial file.
pub fn write_files(dir: &Path, files: &[OutputFile]) -> Result<()> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |e: std::io::Error| HarnessError::Io {
            path,
            message: e.to_string(),
        }
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for f in files {
        let target = dir.join(&f.name);
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
        tmp.write_all(f.contents.as_bytes()).map_err(io_err(&target))?;
        tmp.persist(&target).map_err(|e| io_err(&target)(e.error))?;
    }
    Ok(())
}

fn csv_text(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("writing to memory");
    for row in rows {
        w.write_record(&row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flushing to memory")).expect("csv output is UTF-8")
}

fn footer(text: &mut String, pairs: &[(&str, String)]) {
    for (k, v) in pairs {
        text.push_str(&format!("# {k}={v}\n"));
    }
}

/// Splits `text` into the CSV body and its `# key=value` footer.
fn split_footer(text: &str) -> (String, BTreeMap<String, String>) {
    let mut body = String::new();
    let mut meta = BTreeMap::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
        } else {
            body.push_str(line);
            body.push('\n');
        }
    }
    (body, meta)
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| HarnessError::Input(format!("{what}: not a number: {field:?}")))
}

fn optional(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn records(body: &str, what: &str) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let header = r
        .headers()
        .map_err(|e| HarnessError::Input(format!("{what}: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = r
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| HarnessError::Input(format!("{what}: {e}")))?;
    Ok((header, rows))
}

/// `segment_id,t,m_1..m_w`, one row per measurement vector, with the time
/// step and the measurement losses in the footer.
pub fn trajectory_csv(series: &MeasurementSeries, truncation: &Truncation) -> String {
    let width = series.width().unwrap_or(0);
    let mut header = vec!["segment_id".to_string(), "t".to_string()];
    header.extend((1..=width).map(|i| format!("m_{i}")));
    let rows = series.segments.iter().flat_map(|seg| {
        (0..seg.len()).map(move |i| {
            let mut row = vec![seg.segment_id.to_string(), ((seg.start + i) as f64 * series.dt).to_string()];
            row.extend(seg.point(i).iter().map(f64::to_string));
            row
        })
    });
    let mut text = csv_text(&header, rows);
    footer(
        &mut text,
        &[
            ("dt", series.dt.to_string()),
            ("input_segments", truncation.input_segments.to_string()),
            ("failed_points", truncation.failed_points.to_string()),
            ("dropped_points", truncation.dropped_points.to_string()),
        ],
    );
    text
}

/// Inverse of [`trajectory_csv`]. Rows of one segment whose time indices
/// are not consecutive belong to separate pieces.
pub fn parse_trajectory_csv(text: &str) -> Result<(MeasurementSeries, Truncation)> {
    let what = "trajectory";
    let (body, meta) = split_footer(text);
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| HarnessError::Input(format!("{what}: footer lacks {k}")))
    };
    let dt = parse_f64(get("dt")?, what)?;
    if !(dt > 0.0) {
        return Err(HarnessError::Input(format!("{what}: dt must be positive")));
    }
    let count = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| HarnessError::Input(format!("{what}: bad {k}")))
    };
    let mut truncation = Truncation {
        input_segments: count("input_segments")?,
        failed_points: count("failed_points")?,
        dropped_points: count("dropped_points")?,
        output_segments: 0,
    };
    let (header, rows) = records(&body, what)?;
    if header.len() < 3 || header[0] != "segment_id" || header[1] != "t" {
        return Err(HarnessError::Input(format!("{what}: expected segment_id,t,m_1.. header")));
    }
    let width = header.len() - 2;
    let mut segments: Vec<MeasurementSegment> = Vec::new();
    for (line, row) in rows.iter().enumerate() {
        let id: u64 = row[0]
            .parse()
            .map_err(|_| HarnessError::Input(format!("{what}: row {}: bad segment_id", line + 1)))?;
        let index = (parse_f64(&row[1], what)? / dt).round() as usize;
        let values = row
            .iter()
            .skip(2)
            .map(|v| parse_f64(v, what))
            .collect::<Result<Vec<_>>>()?;
        match segments.last_mut() {
            Some(seg) if seg.segment_id == id && seg.start + seg.len() == index => {
                seg.values.extend(values);
            }
            _ => segments.push(MeasurementSegment {
                segment_id: id,
                start: index,
                width,
                values,
            }),
        }
    }
    if let Some(seg) = segments.iter().find(|s| s.len() < 2) {
        return Err(HarnessError::Input(format!(
            "{what}: segment {} has a single-point piece",
            seg.segment_id
        )));
    }
    truncation.output_segments = segments.len();
    Ok((MeasurementSeries { dt, segments }, truncation))
}

/// `segment_id,t,u,w,x,y,z`: the recorded intrinsic and lab positions.
pub fn world_csv(traj: &WorldTrajectory) -> String {
    let header: Vec<String> = ["segment_id", "t", "u", "w", "x", "y", "z"].map(String::from).to_vec();
    let rows = traj.segments.iter().flat_map(|seg| {
        (0..seg.len()).map(move |i| {
            let p = seg.intrinsic_point(i);
            let l = seg.lab[i];
            vec![
                seg.segment_id.to_string(),
                ((seg.first_index + i) as f64 * seg.dt).to_string(),
                p[0].to_string(),
                p[1].to_string(),
                l[0].to_string(),
                l[1].to_string(),
                l[2].to_string(),
            ]
        })
    });
    let mut text = csv_text(&header, rows);
    footer(&mut text, &[("discarded_draws", traj.discarded.to_string())]);
    text
}

/// `test_id,s1,s2,converged,residual`. Points that could not be charted
/// have empty fields.
pub fn map_csv(entries: &[MapEntry]) -> String {
    let header: Vec<String> = ["test_id", "s1", "s2", "converged", "residual"].map(String::from).to_vec();
    let rows = entries.iter().map(|e| {
        vec![
            e.test_id.to_string(),
            optional(e.location.map(|l| l.s1)),
            optional(e.location.map(|l| l.s2)),
            e.converged.to_string(),
            optional(e.residual),
        ]
    });
    csv_text(&header, rows)
}

pub fn parse_map_csv(text: &str) -> Result<Vec<MapEntry>> {
    let what = "map";
    let (header, rows) = records(text, what)?;
    if header != ["test_id", "s1", "s2", "converged", "residual"] {
        return Err(HarnessError::Input(format!(
            "{what}: expected test_id,s1,s2,converged,residual header"
        )));
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.trim().is_empty() {
            Ok(None)
        } else {
            parse_f64(s, what).map(Some)
        }
    };
    rows.iter()
        .enumerate()
        .map(|(line, row)| {
            let test_id = row[0]
                .parse()
                .map_err(|_| HarnessError::Input(format!("{what}: row {}: bad test_id", line + 1)))?;
            let converged = match &row[3] {
                "true" => true,
                "false" => false,
                other => {
                    return Err(HarnessError::Input(format!(
                        "{what}: row {}: converged must be true or false, got {other:?}",
                        line + 1
                    )))
                }
            };
            let location = match (opt(&row[1])?, opt(&row[2])?) {
                (Some(s1), Some(s2)) => Some(RelativeLocation::new(s1, s2)),
                (None, None) => None,
                _ => return Err(HarnessError::Input(format!("{what}: row {}: half a location", line + 1))),
            };
            if converged && location.is_none() {
                return Err(HarnessError::Input(format!(
                    "{what}: row {}: converged without a location",
                    line + 1
                )));
            }
            Ok(MapEntry {
                test_id,
                location,
                converged,
                residual: opt(&row[4])?,
                failure: None,
            })
        })
        .collect()
}

/// `test_id,s1_a,s2_a,s1_b,s2_b,ds1,ds2` with the summary in the footer.
/// With a configuration, the footer also records both training sizes.
pub fn report_csv(report: &AgreementReport, cfg: Option<&ExperimentConfig>) -> String {
    let header: Vec<String> = ["test_id", "s1_a", "s2_a", "s1_b", "s2_b", "ds1", "ds2"]
        .map(String::from)
        .to_vec();
    let rows = report.points.iter().map(|p| {
        let dev = p.deviation();
        vec![
            p.test_id.to_string(),
            optional(p.a.map(|l| l.s1)),
            optional(p.a.map(|l| l.s2)),
            optional(p.b.map(|l| l.s1)),
            optional(p.b.map(|l| l.s2)),
            optional(dev.map(|d| d[0])),
            optional(dev.map(|d| d[1])),
        ]
    });
    let mut text = csv_text(&header, rows);
    let rel = report.relative_rms();
    let mut pairs = vec![
        ("test_points", report.points.len().to_string()),
        ("common", report.common.to_string()),
        ("failures_a", report.failures_a.to_string()),
        ("failures_b", report.failures_b.to_string()),
        ("rms_ds1", report.rms[0].to_string()),
        ("rms_ds2", report.rms[1].to_string()),
        ("max_ds1", report.max[0].to_string()),
        ("max_ds2", report.max[1].to_string()),
        ("rms_distance", report.rms_distance.to_string()),
        ("span_s1", report.span[0].to_string()),
        ("span_s2", report.span[1].to_string()),
        ("relative_rms_s1", rel[0].to_string()),
        ("relative_rms_s2", rel[1].to_string()),
    ];
    if let Some(cfg) = cfg {
        let (na, nb) = (cfg.machine_a.segments, cfg.machine_b.segments);
        pairs.push(("training_segments_a", na.to_string()));
        pairs.push(("training_segments_b", nb.to_string()));
        if na != nb {
            pairs.push((
                "note",
                format!("machines trained on different trajectory lengths ({na} vs {nb} segments)"),
            ));
        }
    }
    footer(&mut text, &pairs);
    text
}

/// `probes.csv`: `role,test_id,u,w,x,y,z` for the anchors and test points.
pub(super) fn probes_file(cfg: &ExperimentConfig) -> Result<OutputFile> {
    let surface = &cfg.world.surface;
    let (anchors_lab, tests_lab) = super::probe_points(cfg)?;
    let anchors = cfg.probes.anchors(surface);
    let tests = cfg.probes.tests(surface);
    let header: Vec<String> = ["role", "test_id", "u", "w", "x", "y", "z"].map(String::from).to_vec();
    let row = |role: &str, id: String, p: [f64; 2], l: [f64; 3]| {
        vec![
            role.to_string(),
            id,
            p[0].to_string(),
            p[1].to_string(),
            l[0].to_string(),
            l[1].to_string(),
            l[2].to_string(),
        ]
    };
    let mut rows = Vec::new();
    for (i, role) in ["A", "B", "C"].iter().enumerate() {
        rows.push(row(role, String::new(), anchors[i], anchors_lab[i]));
    }
    for (i, (p, l)) in tests.iter().zip(&tests_lab).enumerate() {
        rows.push(row("test", i.to_string(), *p, *l));
    }
    Ok(OutputFile::new("probes.csv", csv_text(&header, rows)))
}
