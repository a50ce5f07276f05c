//! Text formats for annotation traces, per-frame labels and landmarks.
//!
//! Every file starts with a `#` header line naming the format and version,
//! followed by `key=value` fields:
//!
//! ```text
//! # affwild-trace v1 annotator=a01 video=v17 dimension=valence
//! 0,0.1
//! 0.04,0.12
//! ```
//!
//! Label files carry one value per line and landmark files one
//! comma-separated row of `2·L` coordinates per frame. Numbers are written
//! with the shortest representation that parses back to the same value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{AnnotationError, AnnotationTrace, Dimension};
use crate::Scalar;

pub const TRACE_FORMAT: &str = "affwild-trace";
pub const LABEL_FORMAT: &str = "affwild-labels";
pub const LANDMARK_FORMAT: &str = "affwild-landmarks";
pub const FORMAT_VERSION: &str = "v1";

/// Parsed header: format tag plus `key=value` fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub format: String,
    pub version: String,
    pub fields: BTreeMap<String, String>,
}

impl Header {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }
}

fn check_token(what: &str, s: &str) -> Result<(), AnnotationError> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=' || c == ',') {
        Err(AnnotationError::Usage(format!(
            "{what} {s:?} must be nonempty without whitespace, '=' or ','"
        )))
    } else {
        Ok(())
    }
}

fn header_line(format: &str, fields: &[(&str, &str)]) -> String {
    let mut s = format!("# {format} {FORMAT_VERSION}");
    for (k, v) in fields {
        let _ = write!(s, " {k}={v}");
    }
    s.push('\n');
    s
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> AnnotationError {
    AnnotationError::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parses a header line and checks its format tag and version.
pub fn parse_header(path: &str, line: &str, format: &str) -> Result<Header, AnnotationError> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| parse_err(path, 1, "missing '#' header line"))?;
    let mut parts = body.split_whitespace();
    let fmt = parts.next().unwrap_or_default();
    let version = parts.next().unwrap_or_default();
    if fmt != format {
        return Err(parse_err(
            path,
            1,
            format!("expected {format} header, found {fmt:?}"),
        ));
    }
    if version != FORMAT_VERSION {
        return Err(parse_err(
            path,
            1,
            format!("unsupported version {version:?}"),
        ));
    }
    let mut fields = BTreeMap::new();
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| parse_err(path, 1, format!("malformed header field {kv:?}")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    Ok(Header {
        format: fmt.to_string(),
        version: version.to_string(),
        fields,
    })
}

fn require<'a>(path: &str, h: &'a Header, key: &str) -> Result<&'a str, AnnotationError> {
    h.get(key)
        .ok_or_else(|| parse_err(path, 1, format!("header lacks {key}=")))
}

fn parse_num<T: Scalar>(path: &str, line: usize, s: &str) -> Result<T, AnnotationError> {
    s.trim()
        .parse::<T>()
        .map_err(|_| parse_err(path, line, format!("not a number: {s:?}")))
}

/// Data lines with 1-based line numbers, skipping blank lines.
fn body_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

pub fn format_trace<T: Scalar>(trace: &AnnotationTrace<T>) -> Result<String, AnnotationError> {
    check_token("annotator id", trace.annotator_id())?;
    check_token("video id", trace.video_id())?;
    let mut s = header_line(
        TRACE_FORMAT,
        &[
            ("annotator", trace.annotator_id()),
            ("video", trace.video_id()),
            ("dimension", trace.dimension().as_str()),
        ],
    );
    for (t, v) in trace.samples() {
        let _ = writeln!(s, "{t},{v}");
    }
    Ok(s)
}

/// `path` only labels diagnostics.
pub fn parse_trace<T: Scalar>(
    path: &str,
    text: &str,
) -> Result<AnnotationTrace<T>, AnnotationError> {
    let first = text
        .lines()
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let h = parse_header(path, first, TRACE_FORMAT)?;
    let annotator = require(path, &h, "annotator")?;
    let video = require(path, &h, "video")?;
    let dim: Dimension = require(path, &h, "dimension")?
        .parse()
        .map_err(|e: AnnotationError| parse_err(path, 1, e.to_string()))?;
    let mut samples = Vec::new();
    let mut last_line = 1;
    for (ln, line) in body_lines(text) {
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, ln, "expected \"timestamp,value\""))?;
        let t: f64 = parse_num(path, ln, t)?;
        let v: T = parse_num(path, ln, v)?;
        if let Some(&(prev, _)) = samples.last() {
            if t <= prev {
                return Err(parse_err(
                    path,
                    ln,
                    format!("timestamp {t} does not increase"),
                ));
            }
        }
        if !(v >= -T::one() && v <= T::one()) {
            return Err(parse_err(path, ln, format!("value {v} outside [-1, 1]")));
        }
        samples.push((t, v));
        last_line = ln;
    }
    AnnotationTrace::new(annotator, video, dim, samples)
        .map_err(|e| parse_err(path, last_line, e.to_string()))
}

pub fn format_labels<T: Scalar>(
    video_id: &str,
    dim: Dimension,
    labels: &[T],
) -> Result<String, AnnotationError> {
    check_token("video id", video_id)?;
    let frames = labels.len().to_string();
    let mut s = header_line(
        LABEL_FORMAT,
        &[
            ("video", video_id),
            ("dimension", dim.as_str()),
            ("frames", &frames),
        ],
    );
    for v in labels {
        let _ = writeln!(s, "{v}");
    }
    Ok(s)
}

/// Per-frame labels plus their header.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelFile<T> {
    pub video_id: String,
    pub dimension: Dimension,
    pub values: Vec<T>,
}

pub fn parse_labels<T: Scalar>(path: &str, text: &str) -> Result<LabelFile<T>, AnnotationError> {
    let first = text
        .lines()
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let h = parse_header(path, first, LABEL_FORMAT)?;
    let video_id = require(path, &h, "video")?.to_string();
    let dimension: Dimension = require(path, &h, "dimension")?
        .parse()
        .map_err(|e: AnnotationError| parse_err(path, 1, e.to_string()))?;
    let values = body_lines(text)
        .map(|(ln, l)| parse_num(path, ln, l))
        .collect::<Result<Vec<T>, _>>()?;
    if let Some(n) = h.get("frames") {
        if n.parse::<usize>().ok() != Some(values.len()) {
            return Err(parse_err(
                path,
                1,
                format!("header declares {n} frames, file has {}", values.len()),
            ));
        }
    }
    Ok(LabelFile {
        video_id,
        dimension,
        values,
    })
}

pub fn format_landmarks<T: Scalar>(
    video_id: &str,
    rows: &[Vec<T>],
) -> Result<String, AnnotationError> {
    check_token("video id", video_id)?;
    let width = rows.first().map_or(0, Vec::len);
    if width % 2 != 0 || rows.iter().any(|r| r.len() != width) {
        return Err(AnnotationError::Usage(
            "landmark rows need a common even width".into(),
        ));
    }
    let points = (width / 2).to_string();
    let frames = rows.len().to_string();
    let mut s = header_line(
        LANDMARK_FORMAT,
        &[
            ("video", video_id),
            ("points", &points),
            ("frames", &frames),
        ],
    );
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    Ok(s)
}

/// Landmark rows in file order, each `2·points` wide (x0, y0, x1, y1, …).
pub fn parse_landmarks<T: Scalar>(path: &str, text: &str) -> Result<Vec<Vec<T>>, AnnotationError> {
    let first = text
        .lines()
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let h = parse_header(path, first, LANDMARK_FORMAT)?;
    let points: usize = require(path, &h, "points")?
        .parse()
        .map_err(|_| parse_err(path, 1, "points= is not an integer"))?;
    let rows = body_lines(text)
        .map(|(ln, l)| {
            let row = l
                .split(',')
                .map(|v| parse_num(path, ln, v))
                .collect::<Result<Vec<T>, _>>()?;
            if row.len() != 2 * points {
                return Err(parse_err(
                    path,
                    ln,
                    format!("expected {} coordinates, found {}", 2 * points, row.len()),
                ));
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(n) = h.get("frames") {
        if n.parse::<usize>().ok() != Some(rows.len()) {
            return Err(parse_err(
                path,
                1,
                format!("header declares {n} frames, file has {}", rows.len()),
            ));
        }
    }
    Ok(rows)
}

pub fn read_text(path: &Path) -> Result<String, AnnotationError> {
    std::fs::read_to_string(path).map_err(|source| AnnotationError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_trace<T: Scalar>(path: &Path) -> Result<AnnotationTrace<T>, AnnotationError> {
    parse_trace(&path.display().to_string(), &read_text(path)?)
}

pub fn read_labels<T: Scalar>(path: &Path) -> Result<LabelFile<T>, AnnotationError> {
    parse_labels(&path.display().to_string(), &read_text(path)?)
}

pub fn read_landmarks<T: Scalar>(path: &Path) -> Result<Vec<Vec<T>>, AnnotationError> {
    parse_landmarks(&path.display().to_string(), &read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trace_file_layout() {
        let t = AnnotationTrace::new(
            "a01",
            "v7",
            Dimension::Arousal,
            vec![(0.0, 0.1), (0.04, 0.12)],
        )
        .unwrap();
        let text = format_trace(&t).unwrap();
        assert_eq!(
            text,
            "# affwild-trace v1 annotator=a01 video=v7 dimension=arousal\n0,0.1\n0.04,0.12\n"
        );
        assert_eq!(parse_trace::<f64>("t", &text).unwrap(), t);
    }

    #[test]
    fn trace_diagnostics_carry_line_numbers() {
        let text = "# affwild-trace v1 annotator=a video=v dimension=valence\n0,0.1\n0.5,oops\n";
        match parse_trace::<f64>("f.txt", text) {
            Err(AnnotationError::Parse { line, path, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(path, "f.txt");
            }
            other => panic!("{other:?}"),
        }
        let backwards =
            "# affwild-trace v1 annotator=a video=v dimension=valence\n1,0.1\n0.5,0.2\n";
        assert!(matches!(
            parse_trace::<f64>("f", backwards),
            Err(AnnotationError::Parse { line: 3, .. })
        ));
        let range = "# affwild-trace v1 annotator=a video=v dimension=valence\n1,1.5\n";
        assert!(parse_trace::<f64>("f", range).is_err());
        let empty = "# affwild-trace v1 annotator=a video=v dimension=valence\n";
        assert!(parse_trace::<f64>("f", empty).is_err());
        let version = "# affwild-trace v9 annotator=a video=v dimension=valence\n0,0\n";
        assert!(parse_trace::<f64>("f", version).is_err());
    }

    #[test]
    fn ids_with_spaces_are_rejected() {
        let t = AnnotationTrace::new("a b", "v", Dimension::Valence, vec![(0.0, 0.0)]).unwrap();
        assert!(format_trace(&t).is_err());
    }

    #[test]
    fn label_and_landmark_files() {
        let text = format_labels("v1", Dimension::Valence, &[0.25, -0.5, 1.0]).unwrap();
        let parsed = parse_labels::<f64>("l", &text).unwrap();
        assert_eq!(parsed.values, vec![0.25, -0.5, 1.0]);
        assert_eq!(parsed.dimension, Dimension::Valence);
        let bad = text.replace("frames=3", "frames=4");
        assert!(parse_labels::<f64>("l", &bad).is_err());

        let rows = vec![vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.5, 8.0]];
        let text = format_landmarks("v1", &rows).unwrap();
        assert_eq!(parse_landmarks::<f64>("m", &text).unwrap(), rows);
        assert!(format_landmarks("v1", &[vec![1.0, 2.0, 3.0]]).is_err());
    }

    proptest! {
        #[test]
        fn trace_text_round_trips(steps in proptest::collection::vec((1u32..2000, -1.0f64..=1.0), 1..200)) {
            let mut t = 0.0;
            let samples: Vec<(f64, f64)> = steps
                .iter()
                .map(|&(dt, v)| { t += dt as f64 / 1000.0; (t, v) })
                .collect();
            let trace = AnnotationTrace::new("ann", "vid", Dimension::Valence, samples).unwrap();
            let text = format_trace(&trace).unwrap();
            let back = parse_trace::<f64>("p", &text).unwrap();
            prop_assert_eq!(&back, &trace);
            prop_assert_eq!(format_trace(&back).unwrap(), text);
        }
    }
}
