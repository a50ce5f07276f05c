//! Tab-separated dataset manifests pointing at PNG face crops, landmark
//! files and per-dimension label files.
//!
//! ```text
//! # affwild-dataset v1 label_range=1
//! v01	frames/v01	v01.landmarks	v01.valence	v01.arousal
//! v02	frames/v02	-	v02.valence	v02.arousal
//! ```
//!
//! Columns are video id, frame directory, landmark file (`-` for none),
//! valence labels and arousal labels. Relative paths resolve against the
//! manifest's directory. Frames are the directory's `.png` files in name
//! order. Landmark files hold pixel coordinates and are divided by the image
//! width and height (then clamped to `[0, 1]`). Labels are divided by
//! `label_range`, so `label_range=10` maps `[-10, 10]` onto `[-1, 1]`.

use std::path::{Path, PathBuf};

use super::{DatasetError, LabeledSequence};
use crate::annotation::{io, Dimension};
use crate::tensor::Tensor;
use crate::Scalar;

pub const DATASET_FORMAT: &str = "affwild-dataset";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub frames_dir: PathBuf,
    pub landmarks: Option<PathBuf>,
    pub valence: PathBuf,
    pub arousal: PathBuf,
}

/// Parses manifest text; returns entries and the label range.
pub fn parse_manifest(path: &Path, text: &str) -> Result<(Vec<ManifestEntry>, f64), DatasetError> {
    let shown = path.display().to_string();
    let first = text.lines().next().unwrap_or_default();
    let header = io::parse_header(&shown, first, DATASET_FORMAT)?;
    let label_range: f64 = match header.get("label_range") {
        None => 1.0,
        Some(s) => {
            s.parse()
                .ok()
                .filter(|r: &f64| *r > 0.0)
                .ok_or_else(|| DatasetError::Parse {
                    path: shown.clone(),
                    line: 1,
                    msg: format!("label_range={s} is not a positive number"),
                })?
        }
    };
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |s: &str| base.join(s);
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(DatasetError::Parse {
                path: shown.clone(),
                line: i + 1,
                msg: format!("expected 5 tab-separated columns, found {}", cols.len()),
            });
        }
        entries.push(ManifestEntry {
            video_id: cols[0].to_string(),
            frames_dir: resolve(cols[1]),
            landmarks: (cols[2] != "-").then(|| resolve(cols[2])),
            valence: resolve(cols[3]),
            arousal: resolve(cols[4]),
        });
    }
    if entries.is_empty() {
        return Err(DatasetError::Parse {
            path: shown,
            line: 1,
            msg: "manifest lists no videos".into(),
        });
    }
    Ok((entries, label_range))
}

/// Divides labels by `range`, mapping `[-range, range]` onto `[-1, 1]`.
pub fn rescale_labels<T: Scalar>(values: &[T], range: f64) -> Result<Vec<T>, DatasetError> {
    let r = T::lit(range);
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.abs() <= r {
                Ok(v / r)
            } else {
                Err(DatasetError::Usage(format!(
                    "label {i} = {v} outside ±{range}"
                )))
            }
        })
        .collect()
}

fn load_err(path: &Path, msg: impl Into<String>) -> DatasetError {
    DatasetError::Load {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn load_frames<T: Scalar>(dir: &Path) -> Result<(Vec<Tensor<T>>, u32, u32), DatasetError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| load_err(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(load_err(dir, "no .png frames"));
    }
    let mut frames = Vec::with_capacity(files.len());
    let mut size = None;
    for f in &files {
        let img = image::open(f)
            .map_err(|e| load_err(f, e.to_string()))?
            .to_rgb8();
        let dims = img.dimensions();
        if *size.get_or_insert(dims) != dims {
            return Err(load_err(
                f,
                format!("frame is {dims:?}, expected {:?}", size.unwrap()),
            ));
        }
        let data = img
            .as_raw()
            .iter()
            .map(|&p| T::lit(p as f64 / 127.5 - 1.0))
            .collect();
        frames.push(Tensor::new(
            vec![dims.1 as usize, dims.0 as usize, 3],
            data,
        )?);
    }
    let (w, h) = size.unwrap();
    Ok((frames, w, h))
}

fn load_labels<T: Scalar>(
    path: &Path,
    entry: &ManifestEntry,
    dim: Dimension,
    frames: usize,
    range: f64,
) -> Result<Vec<T>, DatasetError> {
    let file = io::read_labels::<T>(path)?;
    if file.video_id != entry.video_id || file.dimension != dim || file.values.len() != frames {
        return Err(load_err(
            path,
            format!(
                "expected {dim} labels for {} with {frames} frames, found {} {} with {}",
                entry.video_id,
                file.dimension,
                file.video_id,
                file.values.len()
            ),
        ));
    }
    rescale_labels(&file.values, range).map_err(|e| load_err(path, e.to_string()))
}

/// Loads every video in a manifest.
pub fn load_dataset<T: Scalar>(manifest: &Path) -> Result<Vec<LabeledSequence<T>>, DatasetError> {
    let text = io::read_text(manifest)?;
    let (entries, range) = parse_manifest(manifest, &text)?;
    entries
        .iter()
        .map(|e| {
            let (frames, w, h) = load_frames::<T>(&e.frames_dir)?;
            let n = frames.len();
            let landmarks = match &e.landmarks {
                None => vec![Vec::new(); n],
                Some(p) => {
                    let rows = io::read_landmarks::<T>(p)?;
                    if rows.len() != n {
                        return Err(load_err(p, format!("{} rows for {n} frames", rows.len())));
                    }
                    let (w, h) = (T::lit(w as f64), T::lit(h as f64));
                    rows.into_iter()
                        .map(|r| {
                            r.iter()
                                .enumerate()
                                .map(|(i, &v)| {
                                    let v = if i % 2 == 0 { v / w } else { v / h };
                                    v.max(T::zero()).min(T::one())
                                })
                                .collect()
                        })
                        .collect()
                }
            };
            let valence = load_labels(&e.valence, e, Dimension::Valence, n, range)?;
            let arousal = load_labels(&e.arousal, e, Dimension::Arousal, n, range)?;
            LabeledSequence::new(e.video_id.clone(), frames, landmarks, valence, arousal)
        })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| load_err(dir, e.to_string()))?;
    }
    std::fs::write(path, bytes).map_err(|e| load_err(path, e.to_string()))
}

/// Writes `dataset` under `dir` in the layout [`load_dataset`] reads and
/// returns the manifest path.
///
/// Pixels are quantized to 8 bits; single-channel frames are written as grey
/// RGB. Landmarks are written in pixel units. Loading the result gives back
/// the labels exactly and the frames within 1/255.
pub fn save_dataset<T: Scalar>(
    dir: &Path,
    dataset: &[LabeledSequence<T>],
) -> Result<PathBuf, DatasetError> {
    let mut manifest = format!("# {DATASET_FORMAT} {} label_range=1\n", io::FORMAT_VERSION);
    for seq in dataset {
        let id = seq.video_id();
        let &[h, w, c] = seq.frame_shape() else {
            return Err(DatasetError::Usage(format!(
                "{id}: frames must be [H, W, C]"
            )));
        };
        if c != 1 && c != 3 {
            return Err(DatasetError::Usage(format!(
                "{id}: cannot write {c}-channel frames as PNG"
            )));
        }
        let frames_dir = format!("frames/{id}");
        let abs = dir.join(&frames_dir);
        std::fs::create_dir_all(&abs).map_err(|e| load_err(&abs, e.to_string()))?;
        for (i, f) in seq.frames().iter().enumerate() {
            let px: Vec<u8> = f
                .data()
                .iter()
                .flat_map(|&v| {
                    let p = ((v.to_f64_lossless() + 1.0) * 127.5)
                        .round()
                        .clamp(0.0, 255.0) as u8;
                    std::iter::repeat_n(p, 4 - c)
                })
                .collect();
            let img = image::RgbImage::from_raw(w as u32, h as u32, px).expect("frame buffer size");
            let path = abs.join(format!("{i:06}.png"));
            img.save(&path)
                .map_err(|e| load_err(&path, e.to_string()))?;
        }
        let lm_col = if seq.landmark_dim() > 0 {
            let rows: Vec<Vec<f64>> = seq
                .landmarks()
                .iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            v.to_f64_lossless() * if i % 2 == 0 { w as f64 } else { h as f64 }
                        })
                        .collect()
                })
                .collect();
            let name = format!("{id}.landmarks");
            write_file(
                &dir.join(&name),
                io::format_landmarks(id, &rows)?.as_bytes(),
            )?;
            name
        } else {
            "-".to_string()
        };
        for (dim, values) in [
            (Dimension::Valence, seq.valence()),
            (Dimension::Arousal, seq.arousal()),
        ] {
            write_file(
                &dir.join(format!("{id}.{dim}")),
                io::format_labels(id, dim, values)?.as_bytes(),
            )?;
        }
        manifest.push_str(&format!(
            "{id}\t{frames_dir}\t{lm_col}\t{id}.valence\t{id}.arousal\n"
        ));
    }
    let path = dir.join("dataset.tsv");
    write_file(&path, manifest.as_bytes())?;
    Ok(path)
}
