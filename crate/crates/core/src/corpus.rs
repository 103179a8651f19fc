//! Directory corpora and the data-access layer.
//!
//! Layout is one directory per class: `root/<class_name>/<image>.png`.
//! The unlabeled loader walks the same tree but carries no label
//! information out: its return type holds pixels and opaque ids only,
//! and it records an image-pixels access, never a label access. The
//! adaptation path consumes exclusively that loader, which is what the
//! access audit verifies.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::label_space::ClassId;

/// What a loader touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    ImagePixels,
    Labels,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessEvent {
    pub root: PathBuf,
    pub kind: AccessKind,
}

/// Records which corpus roots were read and whether label information
/// was extracted from them.
#[derive(Debug, Default)]
pub struct AccessLog {
    events: Vec<AccessEvent>,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, root: &Path, kind: AccessKind) {
        self.events.push(AccessEvent {
            root: root.to_path_buf(),
            kind,
        });
    }

    pub fn events(&self) -> &[AccessEvent] {
        &self.events
    }

    pub fn labels_read_under(&self, root: &Path) -> bool {
        self.events
            .iter()
            .any(|e| e.kind == AccessKind::Labels && e.root.starts_with(root))
    }

    pub fn images_read_under(&self, root: &Path) -> bool {
        self.events
            .iter()
            .any(|e| e.kind == AccessKind::ImagePixels && e.root.starts_with(root))
    }
}

/// Labeled image corpus with dense class ids assigned by sorted class
/// directory name.
#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub images: Vec<Array3<f64>>,
    pub labels: Vec<ClassId>,
    pub ids: Vec<String>,
}

impl LabeledCorpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images_of_class(&self, class: ClassId) -> Vec<&Array3<f64>> {
        self.images
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == class)
            .map(|(img, _)| img)
            .collect()
    }
}

/// Unlabeled image corpus: pixels and opaque ids, nothing else.
#[derive(Debug, Clone)]
pub struct UnlabeledCorpus {
    pub root: PathBuf,
    pub images: Vec<Array3<f64>>,
    pub ids: Vec<String>,
}

impl UnlabeledCorpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Decodes an 8-bit RGB PNG into `(3, H, W)` values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Array3<f64>> {
    let decoded = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = decoded.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in decoded.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = pixel.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Encodes `(3, H, W)` values in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_image(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if c != 3 {
        return Err(Error::InvalidInput(format!(
            "expected 3 channels, got {c}"
        )));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, pixel) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = img[(ch, y as usize, x as usize)];
            pixel.0[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    buf.save(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn sorted_entries(dir: &Path, dirs_only: bool) -> Result<Vec<PathBuf>> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read directory {}: {e}", dir.display())))?
    {
        let path = entry?.path();
        if dirs_only == path.is_dir() {
            entries.push(path);
        }
    }
    entries.sort();
    Ok(entries)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir, false)?
        .into_iter()
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect())
}

/// Loads a labeled corpus; reads both pixels and labels.
pub fn load_labeled(root: &Path, log: &mut AccessLog) -> Result<LabeledCorpus> {
    log.record(root, AccessKind::Labels);
    log.record(root, AccessKind::ImagePixels);
    let class_dirs = sorted_entries(root, true)?;
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Data(format!("unreadable class name {}", dir.display())))?
            .to_string();
        let files = png_files(dir)?;
        if files.is_empty() {
            return Err(Error::Data(format!(
                "class directory {} holds no png files",
                dir.display()
            )));
        }
        for file in files {
            images.push(read_image(&file)?);
            labels.push(class_id);
            ids.push(format!(
                "{name}/{}",
                file.file_stem().and_then(|s| s.to_str()).unwrap_or("?")
            ));
        }
        class_names.push(name);
    }
    Ok(LabeledCorpus {
        root: root.to_path_buf(),
        class_names,
        images,
        labels,
        ids,
    })
}

/// Loads pixels from every png under `root` (one level of class
/// directories or a flat directory); label information is discarded at
/// the boundary and never recorded.
pub fn load_unlabeled(root: &Path, log: &mut AccessLog) -> Result<UnlabeledCorpus> {
    log.record(root, AccessKind::ImagePixels);
    let mut files = png_files(root)?;
    for dir in sorted_entries(root, true)? {
        files.extend(png_files(&dir)?);
    }
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no png files under {}",
            root.display()
        )));
    }
    files.sort();
    let mut images = Vec::with_capacity(files.len());
    let mut ids = Vec::with_capacity(files.len());
    for (i, file) in files.iter().enumerate() {
        images.push(read_image(file)?);
        // Opaque position-based id; the path is not propagated.
        ids.push(format!("sample_{i:05}"));
    }
    Ok(UnlabeledCorpus {
        root: root.to_path_buf(),
        images,
        ids,
    })
}

/// Writes a labeled corpus in the directory-per-class layout.
pub fn write_corpus(
    root: &Path,
    class_names: &[String],
    images: &[Array3<f64>],
    labels: &[ClassId],
) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::InvalidInput("image/label count mismatch".into()));
    }
    let mut per_class_counter = vec![0usize; class_names.len()];
    for (img, &label) in images.iter().zip(labels) {
        let name = class_names.get(label).ok_or_else(|| {
            Error::InvalidInput(format!("label {label} has no class name"))
        })?;
        let n = per_class_counter[label];
        per_class_counter[label] += 1;
        write_image(&root.join(name).join(format!("{n:04}.png")), img)?;
    }
    Ok(())
}
