//! Dataset files: a JSON-lines scene file plus a binary raster sidecar.
//!
//! ```text
//! {"version":1,"config":{...}}
//! {"humans":[[cx,cy,w,h],...],"objects":[[class,cx,cy,w,h],...],"interactions":[[h,o,verb],...]}
//! ```
//!
//! The sidecar (same stem, `.raster` extension) starts with the 4-byte magic
//! `RRIM` followed by `u32` scene count, channel count and image size, then
//! holds `scenes × 3 × size × size` little-endian `f32` values.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataConfig, Dataset, Interaction, ObjectInstance, RasterImage, SceneSpec};
use crate::geometry::BBox;

pub const FORMAT_VERSION: u32 = 1;
const RASTER_MAGIC: &[u8; 4] = b"RRIM";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("raster sidecar {path}: {message}")]
    Raster { path: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: DataConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneLine {
    humans: Vec<[f64; 4]>,
    objects: Vec<(usize, f64, f64, f64, f64)>,
    interactions: Vec<[usize; 3]>,
}

impl From<&SceneSpec> for SceneLine {
    fn from(s: &SceneSpec) -> Self {
        Self {
            humans: s.humans.iter().map(BBox::to_array).collect(),
            objects: s
                .objects
                .iter()
                .map(|o| (o.class, o.bbox.cx, o.bbox.cy, o.bbox.w, o.bbox.h))
                .collect(),
            interactions: s
                .interactions
                .iter()
                .map(|i| [i.human, i.object, i.verb])
                .collect(),
        }
    }
}

impl SceneLine {
    fn into_scene(self, cfg: &DataConfig) -> Result<SceneSpec, String> {
        let scene = SceneSpec {
            humans: self.humans.into_iter().map(BBox::from_array).collect(),
            objects: self
                .objects
                .into_iter()
                .map(|(class, cx, cy, w, h)| ObjectInstance {
                    class,
                    bbox: BBox::new(cx, cy, w, h),
                })
                .collect(),
            interactions: self
                .interactions
                .into_iter()
                .map(|[human, object, verb]| Interaction {
                    human,
                    object,
                    verb,
                })
                .collect(),
        };
        for it in &scene.interactions {
            if it.human >= scene.humans.len() || it.object >= scene.objects.len() {
                return Err(format!(
                    "interaction [{}, {}, {}] references a missing instance",
                    it.human, it.object, it.verb
                ));
            }
            if it.verb >= cfg.num_verbs {
                return Err(format!("verb {} outside 0..{}", it.verb, cfg.num_verbs));
            }
        }
        if let Some(o) = scene.objects.iter().find(|o| o.class >= cfg.num_object_classes) {
            return Err(format!("object class {} outside 0..{}", o.class, cfg.num_object_classes));
        }
        if !scene.humans.iter().chain(scene.objects.iter().map(|o| &o.bbox)).all(BBox::is_valid) {
            return Err("box with non-positive size".into());
        }
        Ok(scene)
    }
}

/// Sidecar path for a dataset file.
pub fn raster_path(path: &Path) -> PathBuf {
    path.with_extension("raster")
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        version: FORMAT_VERSION,
        config: dataset.config.clone(),
    };
    let mut text = serde_json::to_string(&header).expect("serializable header");
    text.push('\n');
    for s in &dataset.scenes {
        text.push_str(&serde_json::to_string(&SceneLine::from(s)).expect("serializable scene"));
        text.push('\n');
    }
    out.write_all(text.as_bytes()).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))?;

    let size = dataset.config.image_size;
    let rpath = raster_path(path);
    let mut bytes = Vec::with_capacity(16 + dataset.images.len() * 3 * size * size * 4);
    bytes.extend_from_slice(RASTER_MAGIC);
    bytes.extend_from_slice(&(dataset.images.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(RasterImage::CHANNELS as u32).to_le_bytes());
    bytes.extend_from_slice(&(size as u32).to_le_bytes());
    for img in &dataset.images {
        for v in &img.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(&rpath, bytes).map_err(io_err(&rpath))
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: usize, message: String| DatasetError::Parse {
        path: path.display().to_string(),
        line,
        message,
    };

    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header line".into()))?
        .map_err(io_err(path))?;
    let probe: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    let version = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(DatasetError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(probe).map_err(|e| parse_err(1, e.to_string()))?;
    let config = header.config;

    let mut scenes = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SceneLine =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        scenes.push(parsed.into_scene(&config).map_err(|m| parse_err(lineno, m))?);
    }

    let rpath = raster_path(path);
    let raster_err = |message: String| DatasetError::Raster {
        path: rpath.display().to_string(),
        message,
    };
    let bytes = fs::read(&rpath).map_err(io_err(&rpath))?;
    if bytes.len() < 16 || &bytes[..4] != RASTER_MAGIC {
        return Err(raster_err("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let (count, channels, size) = (word(1), word(2), word(3));
    if count != scenes.len() || channels != RasterImage::CHANNELS || size != config.image_size {
        return Err(raster_err(format!(
            "header {count}×{channels}×{size}² does not match {} scenes of {}²",
            scenes.len(),
            config.image_size
        )));
    }
    let per = channels * size * size;
    if bytes.len() != 16 + count * per * 4 {
        return Err(raster_err(format!("expected {} payload bytes", count * per * 4)));
    }
    let images = bytes[16..]
        .chunks_exact(per * 4)
        .map(|chunk| RasterImage {
            size,
            data: chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect(),
        })
        .collect();

    Ok(Dataset {
        config,
        scenes,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::Executor;
    use crate::synthdata::generate_dataset;

    #[test]
    fn empty_dataset_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = Dataset {
            config: DataConfig::default(),
            scenes: vec![],
            images: vec![],
        };
        write_dataset(&ds, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("{\"version\":1,\"config\":{"));
        assert_eq!(read_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn generated_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = generate_dataset(&DataConfig::default(), 10, &Executor::sequential()).unwrap();
        write_dataset(&ds, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn hand_written_line_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let header = serde_json::to_string(&Header {
            version: 1,
            config: DataConfig::default(),
        })
        .unwrap();
        let line = r#"{"humans":[[20,30,10,16]],"objects":[[2,40,30,8,8]],"interactions":[[0,0,0]]}"#;
        fs::write(&path, format!("{header}\n{line}\n")).unwrap();
        let mut raster = b"RRIM".to_vec();
        for v in [1u32, 3, 64] {
            raster.extend_from_slice(&v.to_le_bytes());
        }
        raster.extend(std::iter::repeat_n(0u8, 3 * 64 * 64 * 4));
        fs::write(raster_path(&path), raster).unwrap();

        let ds = read_dataset(&path).unwrap();
        assert_eq!(
            ds.scenes,
            vec![SceneSpec {
                humans: vec![BBox::new(20.0, 30.0, 10.0, 16.0)],
                objects: vec![ObjectInstance {
                    class: 2,
                    bbox: BBox::new(40.0, 30.0, 8.0, 8.0)
                }],
                interactions: vec![Interaction {
                    human: 0,
                    object: 0,
                    verb: 0
                }],
            }]
        );
    }

    #[test]
    fn malformed_line_cites_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = generate_dataset(&DataConfig::default(), 3, &Executor::sequential()).unwrap();
        write_dataset(&ds, &path).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text = text.replacen("\"interactions\"", "\"interactionz\"", 2);
        fs::write(&path, text).unwrap();
        match read_dataset(&path) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(&path, "{\"version\":2,\"config\":{}}\n").unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(DatasetError::Version { found: 2, .. })
        ));
    }
}
