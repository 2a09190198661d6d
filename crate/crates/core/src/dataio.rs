//! Line-delimited JSON manifests and detection files.
//!
//! Manifest: one [`ManifestRecord`] per line, image paths relative to the
//! manifest's directory. Detections: a [`DetectionsHeader`] line followed by
//! one [`DetectionRecord`] per line, sorted by image id then descending
//! fused score.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::GrayImage;
use crate::supervision::Annotation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub vis_x: f64,
    pub vis_y: f64,
    pub vis_w: f64,
    pub vis_h: f64,
    pub occlusion: f64,
    pub ignore: bool,
}

impl From<&Annotation> for AnnotationRecord {
    fn from(a: &Annotation) -> Self {
        AnnotationRecord {
            x: a.bbox.x,
            y: a.bbox.y,
            w: a.bbox.w,
            h: a.bbox.h,
            vis_x: a.visible.x,
            vis_y: a.visible.y,
            vis_w: a.visible.w,
            vis_h: a.visible.h,
            occlusion: a.occlusion,
            ignore: a.ignore,
        }
    }
}

impl AnnotationRecord {
    fn check(&self) -> std::result::Result<(), String> {
        let fields = [
            ("x", self.x),
            ("y", self.y),
            ("w", self.w),
            ("h", self.h),
            ("vis_x", self.vis_x),
            ("vis_y", self.vis_y),
            ("vis_w", self.vis_w),
            ("vis_h", self.vis_h),
            ("occlusion", self.occlusion),
        ];
        if let Some((name, v)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(format!("field `{name}` is not finite ({v})"));
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return Err(format!("field `occlusion` = {} outside [0, 1]", self.occlusion));
        }
        Ok(())
    }

    pub fn to_annotation(&self) -> Result<Annotation> {
        self.check().map_err(Error::InvalidArgument)?;
        Annotation::new(
            BBox::new(self.x, self.y, self.w, self.h)?,
            BBox::new(self.vis_x, self.vis_y, self.vis_w, self.vis_h)?,
            self.occlusion,
            self.ignore,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image_path: String,
    pub image_w: usize,
    pub image_h: usize,
    pub annotations: Vec<AnnotationRecord>,
}

impl ManifestRecord {
    pub fn new(image_path: impl Into<String>, image_w: usize, image_h: usize, annotations: &[Annotation]) -> Self {
        ManifestRecord {
            image_path: image_path.into(),
            image_w,
            image_h,
            annotations: annotations.iter().map(AnnotationRecord::from).collect(),
        }
    }

    pub fn annotations(&self) -> Result<Vec<Annotation>> {
        self.annotations.iter().map(AnnotationRecord::to_annotation).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub fused_score: f64,
    pub rpn_score: f64,
    /// Absent when the detector ran without its classifier stage.
    pub bcn_score: Option<f64>,
}

impl DetectionRecord {
    pub fn bbox(&self) -> Result<BBox> {
        BBox::new(self.x, self.y, self.w, self.h)
    }

    fn check(&self) -> std::result::Result<(), String> {
        for (name, v) in [("x", self.x), ("y", self.y), ("w", self.w), ("h", self.h)] {
            if !v.is_finite() {
                return Err(format!("field `{name}` is not finite ({v})"));
            }
        }
        let scores = [("fused_score", Some(self.fused_score)), ("rpn_score", Some(self.rpn_score)), ("bcn_score", self.bcn_score)];
        for (name, v) in scores {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("field `{name}` = {v} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

pub const DETECTIONS_FORMAT: &str = "sdsrcnn-detections";
pub const DETECTIONS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsHeader {
    pub format: String,
    pub version: u32,
}

impl Default for DetectionsHeader {
    fn default() -> Self {
        DetectionsHeader {
            format: DETECTIONS_FORMAT.into(),
            version: DETECTIONS_VERSION,
        }
    }
}

fn parse_line<T: DeserializeOwned>(path: &Path, line_no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message: e.to_string(),
    })
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn push_json<T: Serialize>(buf: &mut Vec<u8>, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *buf, value)
        .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
    buf.push(b'\n');
    Ok(())
}

fn write_file(path: &Path, buf: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(buf).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let record: ManifestRecord = parse_line(path, n, &line)?;
            for a in &record.annotations {
                a.check().map_err(|message| Error::Parse {
                    path: path.to_path_buf(),
                    line: n,
                    message,
                })?;
            }
            Ok(record)
        })
        .collect()
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        push_json(&mut buf, r)?;
    }
    write_file(path, &buf)
}

/// Sorts by image id, then descending fused score; equal keys keep input order.
pub fn sort_detections(records: &mut [DetectionRecord]) {
    records.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then(b.fused_score.total_cmp(&a.fused_score))
    });
}

pub fn write_detections(records: &[DetectionRecord], path: &Path) -> Result<()> {
    let mut sorted = records.to_vec();
    sort_detections(&mut sorted);
    let mut buf = Vec::new();
    push_json(&mut buf, &DetectionsHeader::default())?;
    for r in &sorted {
        push_json(&mut buf, r)?;
    }
    write_file(path, &buf)
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let lines = read_lines(path)?;
    let Some((n, first)) = lines.first() else {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing detections header".into(),
        });
    };
    let header: DetectionsHeader = parse_line(path, *n, first)?;
    if header != DetectionsHeader::default() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: *n,
            message: format!("unsupported detections format {} v{}", header.format, header.version),
        });
    }
    lines[1..]
        .iter()
        .map(|(n, line)| {
            let record: DetectionRecord = parse_line(path, *n, line)?;
            record.check().map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line: *n,
                message,
            })?;
            Ok(record)
        })
        .collect()
}

/// A manifest together with the directory its image paths are relative to.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Manifest {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records: read_manifest(path)?,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].image_path)
    }

    /// Loads image `i`, checking it against the recorded size.
    pub fn image(&self, i: usize) -> Result<GrayImage> {
        let r = &self.records[i];
        let img = GrayImage::read_pgm(&self.image_path(i))?;
        if img.width != r.image_w || img.height != r.image_h {
            return Err(Error::ShapeMismatch {
                context: format!("image {}", r.image_path),
                expected: vec![r.image_h, r.image_w],
                got: vec![img.height, img.width],
            });
        }
        Ok(img)
    }

    pub fn annotations(&self, i: usize) -> Result<Vec<Annotation>> {
        self.records[i].annotations()
    }

    /// Identifier used in detection files.
    pub fn image_id(&self, i: usize) -> &str {
        &self.records[i].image_path
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_manifest() -> Vec<ManifestRecord> {
        let a = Annotation::new(
            BBox::new(1.5, 2.25, 41.0, 100.0).unwrap(),
            BBox::new(1.5, 2.25, 41.0, 60.0).unwrap(),
            0.4,
            false,
        )
        .unwrap();
        vec![
            ManifestRecord::new("000000.pgm", 320, 240, &[a, Annotation::unoccluded(a.bbox).with_ignore(true)]),
            ManifestRecord::new("000001.pgm", 320, 240, &[]),
        ]
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "").unwrap();
        assert!(read_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let records = sample_manifest();
        write_manifest(&records, &p).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), records);
        let first = fs::read(&p).unwrap();
        write_manifest(&records, &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }

    #[test]
    fn occlusion_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut records = sample_manifest();
        records[0].annotations[0].occlusion = 1.5;
        write_manifest(&records, &p).unwrap();
        match read_manifest(&p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 1);
                assert!(message.contains("occlusion"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_field_names_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&sample_manifest()[1]).unwrap();
        let bad = good.replacen('{', "{\"colour\":1,", 1);
        fs::write(&p, format!("{good}\n{bad}\n")).unwrap();
        match read_manifest(&p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("colour"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&p, "{not json").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn zero_detections_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_detections(&[], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(read_detections(&p).unwrap().is_empty());
        fs::write(&p, "").unwrap();
        assert!(read_detections(&p).is_err());
    }

    #[test]
    fn detection_scores_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let d = DetectionRecord {
            image_id: "a".into(),
            x: 0.0,
            y: 0.0,
            w: 1.0,
            h: 2.0,
            fused_score: 1.5,
            rpn_score: 0.5,
            bcn_score: None,
        };
        write_detections(&[d], &p).unwrap();
        assert!(matches!(read_detections(&p), Err(Error::Parse { line: 2, .. })));
    }

    fn detection() -> impl Strategy<Value = DetectionRecord> {
        (
            "[a-c]{1,3}",
            (-1e3..1e3f64, -1e3..1e3f64, 1e-3..1e3f64, 1e-3..1e3f64),
            (0.0..=1.0f64, 0.0..=1.0f64, prop::option::of(0.0..=1.0f64)),
        )
            .prop_map(|(id, (x, y, w, h), (f, r, b))| DetectionRecord {
                image_id: id,
                x,
                y,
                w,
                h,
                fused_score: f,
                rpn_score: r,
                bcn_score: b,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn detections_roundtrip(records in prop::collection::vec(detection(), 0..20)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("d.jsonl");
            write_detections(&records, &p).unwrap();
            let back = read_detections(&p).unwrap();
            let mut expected = records.clone();
            sort_detections(&mut expected);
            prop_assert_eq!(&back, &expected);
            for w in back.windows(2) {
                prop_assert!(w[0].image_id < w[1].image_id
                    || (w[0].image_id == w[1].image_id && w[0].fused_score >= w[1].fused_score));
            }
        }

        #[test]
        fn manifest_roundtrip_random(
            boxes in prop::collection::vec((-50.0..500.0f64, -50.0..500.0f64, 0.5..300.0f64, 0.5..300.0f64, 0.0..0.9f64, any::<bool>()), 0..6)
        ) {
            let anns: Vec<Annotation> = boxes.iter().map(|&(x, y, w, h, f, ig)| {
                let b = BBox::new(x, y, w, h).unwrap();
                let v = BBox::new(x, y, w, h * (1.0 - f)).unwrap();
                Annotation::new(b, v, 1.0 - v.area() / b.area(), ig).unwrap()
            }).collect();
            let records = vec![ManifestRecord::new("img.pgm", 640, 480, &anns)];
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.jsonl");
            write_manifest(&records, &p).unwrap();
            let back = read_manifest(&p).unwrap();
            prop_assert_eq!(&back, &records);
            prop_assert_eq!(back[0].annotations().unwrap(), anns);
        }
    }
}
