//! Binary PPM/PGM files and the dataset manifest.
//!
//! Manifest lines, paths relative to the manifest's directory:
//!
//! ```text
//! # num_labels 6
//! <id> <image.ppm> strong <labels.pgm>
//! <id> <image.ppm> weak <l1,l2,...>
//! <id> <image.ppm> boxes <class:x0:y0:x1:y1;...>
//! ```
//!
//! An empty box list is written as `-`. Lines starting with `#` are comments,
//! except the optional `# num_labels N` directive.

use std::fs;
use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Annotation, BoxAnnotation, Image, LabelMap, LabeledBox, Rect, Sample, WeakLabels};

pub const MANIFEST_NAME: &str = "manifest.txt";

pub fn write_ppm(image: &Image) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::invalid(format!(
            "PPM needs 3 channels, image has {}",
            image.channels()
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.labels());
    out
}

/// Parses a binary PNM header; returns `(width, height, payload offset)`.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::data(format!(
            "expected {} file",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::data("truncated PNM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::data("malformed PNM header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::data("malformed PNM header"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::data(format!("unsupported PNM maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::data("PNM image with zero size"));
    }
    Ok((width, height, pos + 1))
}

pub fn read_ppm(bytes: &[u8]) -> Result<Image> {
    let (w, h, off) = parse_header(bytes, b"P6")?;
    let payload = &bytes[off..];
    if payload.len() != w * h * 3 {
        return Err(Error::data(format!(
            "PPM payload {} bytes, expected {}",
            payload.len(),
            w * h * 3
        )));
    }
    Image::new(h, w, 3, payload.iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn read_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (w, h, off) = parse_header(bytes, b"P5")?;
    let payload = &bytes[off..];
    if payload.len() != w * h {
        return Err(Error::data(format!(
            "PGM payload {} bytes, expected {}",
            payload.len(),
            w * h
        )));
    }
    LabelMap::new(h, w, payload.to_vec())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::data(format!("sample id {id:?} is not a plain file name")))
    }
}

fn format_boxes(b: &BoxAnnotation) -> String {
    if b.is_empty() {
        return "-".into();
    }
    b.boxes
        .iter()
        .map(|lb| {
            let r = lb.rect;
            format!("{}:{}:{}:{}:{}", lb.class, r.x0, r.y0, r.x1, r.y1)
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_boxes(field: &str) -> Result<BoxAnnotation> {
    if field == "-" {
        return Ok(BoxAnnotation::default());
    }
    let boxes = field
        .split(';')
        .map(|item| {
            let parts: Vec<usize> = item
                .split(':')
                .map(|p| p.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::data(format!("malformed box {item:?}")))?;
            match parts[..] {
                [class, x0, y0, x1, y1] if class <= u8::MAX as usize => Ok(LabeledBox {
                    class: class as u8,
                    rect: Rect::new(x0, y0, x1, y1),
                }),
                _ => Err(Error::data(format!("malformed box {item:?}"))),
            }
        })
        .collect::<Result<_>>()?;
    Ok(BoxAnnotation::new(boxes))
}

fn parse_weak(field: &str) -> Result<Vec<u8>> {
    if field.is_empty() || field == "-" {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|l| l.parse::<u8>().map_err(|_| Error::data(format!("malformed weak label {l:?}"))))
        .collect()
}

/// Writes images, label maps and the manifest under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let mut manifest = format!("# num_labels {}\n", dataset.num_labels);
    for s in &dataset.samples {
        check_id(&s.id)?;
        let image_rel = format!("images/{}.ppm", s.id);
        write_file(&dir.join(&image_rel), &write_ppm(&s.image)?)?;
        let tail = match &s.annotation {
            Annotation::Strong(gt) => {
                let rel = format!("labels/{}.pgm", s.id);
                write_file(&dir.join(&rel), &write_pgm(gt))?;
                format!("strong {rel}")
            }
            Annotation::ImageLevel(z) => format!(
                "weak {}",
                z.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
            ),
            Annotation::Boxes(b) => format!("boxes {}", format_boxes(b)),
        };
        manifest.push_str(&format!("{} {image_rel} {tail}\n", s.id));
    }
    write_file(&dir.join(MANIFEST_NAME), manifest.as_bytes())
}

enum Pending {
    Strong(PathBuf),
    Weak(Vec<u8>),
    Boxes(BoxAnnotation),
}

/// Reads a dataset from a manifest file or a directory containing one.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let text = String::from_utf8(read_file(&manifest_path)?)
        .map_err(|_| Error::data("manifest is not UTF-8"))?;

    let mut declared = None;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(n) = comment.trim().strip_prefix("num_labels") {
                declared = Some(
                    n.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::data(format!("line {}: bad num_labels", lineno + 1)))?,
                );
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, image, kind, ref rest @ ..] = fields[..] else {
            return Err(Error::data(format!("line {}: too few fields", lineno + 1)));
        };
        let arg = match rest {
            [] => "",
            [a] => a,
            _ => return Err(Error::data(format!("line {}: too many fields", lineno + 1))),
        };
        let pending = match kind {
            "strong" if !arg.is_empty() => Pending::Strong(base.join(arg)),
            "weak" => Pending::Weak(parse_weak(arg)?),
            "boxes" if !arg.is_empty() => Pending::Boxes(parse_boxes(arg)?),
            _ => {
                return Err(Error::data(format!(
                    "line {}: bad annotation {kind:?} {arg:?}",
                    lineno + 1
                )))
            }
        };
        rows.push((id.to_string(), base.join(image), pending));
    }

    let mut samples = Vec::with_capacity(rows.len());
    let mut max_label = 0usize;
    let mut pending = Vec::with_capacity(rows.len());
    for (id, image_path, p) in rows {
        let image = read_ppm(&read_file(&image_path)?)?;
        let p = match p {
            Pending::Strong(path) => {
                let gt = read_pgm(&read_file(&path)?)?;
                max_label = max_label.max(gt.max_label() as usize);
                Resolved::Strong(gt)
            }
            Pending::Weak(l) => {
                max_label = max_label.max(l.iter().copied().max().unwrap_or(0) as usize);
                Resolved::Weak(l)
            }
            Pending::Boxes(b) => {
                max_label =
                    max_label.max(b.boxes.iter().map(|x| x.class as usize).max().unwrap_or(0));
                Resolved::Boxes(b)
            }
        };
        pending.push((id, image, p));
    }
    let num_labels = declared.unwrap_or(max_label + 1).max(1);
    if max_label >= num_labels {
        return Err(Error::data(format!(
            "label {max_label} exceeds declared num_labels {num_labels}"
        )));
    }
    for (id, image, p) in pending {
        let annotation = match p {
            Resolved::Strong(gt) => Annotation::Strong(gt),
            Resolved::Weak(l) => Annotation::ImageLevel(WeakLabels::from_labels(num_labels, l)?),
            Resolved::Boxes(b) => Annotation::Boxes(b),
        };
        samples.push(Sample::new(id, image, annotation).map_err(|e| Error::data(e.to_string()))?);
    }
    Ok(Dataset {
        num_labels,
        samples,
    })
}

enum Resolved {
    Strong(LabelMap),
    Weak(Vec<u8>),
    Boxes(BoxAnnotation),
}
