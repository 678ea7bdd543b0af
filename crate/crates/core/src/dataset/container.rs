use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::npy::{read_npz, write_npz, NpyArray};
use crate::task_model::UNLABELED;

pub const SIDE: usize = 32;
pub const IMAGE_BYTES: usize = 3 * SIDE * SIDE;
pub const DEFAULT_SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRange {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl SplitRange {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub name: String,
    pub shape: [usize; 4],
    pub dtype: String,
    pub splits: Vec<SplitRange>,
    pub classes: Vec<String>,
}

/// `[N,3,32,32]` u8 images with one u16 label each, partitioned into
/// contiguous named splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageContainer {
    pub manifest: ContainerManifest,
    pub pixels: Vec<u8>,
    pub labels: Vec<u16>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum SplitNaming {
    /// Whichever of `train`, `val`, `test` are present (at least one).
    #[default]
    Auto,
    /// Exactly these splits; each must be present.
    Explicit(Vec<String>),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImportOptions {
    pub splits: SplitNaming,
    /// Nearest-neighbour resampling of other sizes to 32x32.
    pub resize: bool,
}

impl ImageContainer {
    /// Builds and validates a container; `splits` are `(name, count)` in order.
    pub fn new(name: &str, pixels: Vec<u8>, labels: Vec<u16>, splits: &[(&str, usize)], classes: Vec<String>) -> Result<Self> {
        let mut ranges = Vec::new();
        let mut start = 0;
        for (s, n) in splits {
            ranges.push(SplitRange {
                name: s.to_string(),
                start,
                end: start + n,
            });
            start += n;
        }
        let c = ImageContainer {
            manifest: ContainerManifest {
                name: name.to_string(),
                shape: [labels.len(), 3, SIDE, SIDE],
                dtype: "u8".into(),
                splits: ranges,
                classes,
            },
            pixels,
            labels,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let n = m.shape[0];
        if m.shape[1..] != [3, SIDE, SIDE] || m.dtype != "u8" {
            return Err(Error::validation(format!("container must hold [N,3,32,32] u8, got {:?} {}", m.shape, m.dtype)));
        }
        if n == 0 {
            return Err(Error::validation("container holds no images"));
        }
        if self.pixels.len() != n * IMAGE_BYTES {
            return Err(Error::validation(format!("pixel blob is {} bytes, expected {}", self.pixels.len(), n * IMAGE_BYTES)));
        }
        if self.labels.len() != n {
            return Err(Error::validation(format!("{} labels for {n} images", self.labels.len())));
        }
        if let Some(l) = self
            .labels
            .iter()
            .find(|&&l| l != UNLABELED && l as usize >= m.classes.len())
        {
            return Err(Error::validation(format!("label {l} out of range for {} classes", m.classes.len())));
        }
        let mut pos = 0;
        let mut seen = std::collections::BTreeSet::new();
        for s in &m.splits {
            if s.start != pos || s.end < s.start || !seen.insert(&s.name) {
                return Err(Error::validation("splits must be contiguous, ordered and uniquely named"));
            }
            pos = s.end;
        }
        if pos != n {
            return Err(Error::validation(format!("splits cover {pos} of {n} images")));
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Option<&SplitRange> {
        self.manifest.splits.iter().find(|s| s.name == name)
    }

    /// `train` if present, else the first split.
    pub fn train_split(&self) -> &str {
        match self.split("train") {
            Some(s) => &s.name,
            None => &self.manifest.splits[0].name,
        }
    }

    /// The split models are scored on: `val`, else `test`, else the training split.
    pub fn eval_split(&self) -> &str {
        ["val", "test"]
            .into_iter()
            .find(|s| self.split(s).is_some())
            .unwrap_or_else(|| self.train_split())
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// Split name -> label -> count; unlabeled images count under `unlabeled`.
    pub fn class_distribution(&self) -> BTreeMap<String, BTreeMap<String, usize>> {
        let mut out = BTreeMap::new();
        for s in &self.manifest.splits {
            let counts: &mut BTreeMap<String, usize> = out.entry(s.name.clone()).or_default();
            for &l in &self.labels[s.range()] {
                let key = if l == UNLABELED { "unlabeled".to_string() } else { l.to_string() };
                *counts.entry(key).or_default() += 1;
            }
        }
        out
    }

    /// Canonical bytes of everything but the display name.
    pub fn canonical_manifest(&self) -> Vec<u8> {
        let m = &self.manifest;
        let v = serde_json::json!({
            "shape": m.shape,
            "dtype": m.dtype,
            "splits": m.splits,
            "classes": m.classes,
        });
        serde_json::to_vec(&v).expect("manifest serializes")
    }

    pub fn label_bytes(&self) -> Vec<u8> {
        self.labels.iter().flat_map(|l| l.to_le_bytes()).collect()
    }

    /// SHA-256 over the canonical manifest, pixels and little-endian labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_manifest());
        h.update(&self.pixels);
        h.update(self.label_bytes());
        hex::encode(h.finalize())
    }

    pub fn import_npz(path: &Path, name: &str, options: &ImportOptions) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::not_found(format!("file {}", path.display())),
            _ => Error::Io(e),
        })?;
        let arrays = read_npz(BufReader::new(file))?;
        Self::from_arrays(&arrays, name, options)
    }

    pub fn from_arrays(arrays: &BTreeMap<String, NpyArray>, name: &str, options: &ImportOptions) -> Result<Self> {
        let split_names: Vec<String> = match &options.splits {
            SplitNaming::Auto => {
                let found: Vec<String> = DEFAULT_SPLITS
                    .iter()
                    .filter(|s| arrays.contains_key(&format!("{s}_images")))
                    .map(|s| s.to_string())
                    .collect();
                if found.is_empty() {
                    return Err(Error::validation(format!(
                        "archive has none of train_images, val_images, test_images (keys: {})",
                        arrays.keys().cloned().collect::<Vec<_>>().join(", ")
                    )));
                }
                found
            }
            SplitNaming::Explicit(names) => {
                for s in names {
                    if !arrays.contains_key(&format!("{s}_images")) {
                        return Err(Error::validation(format!("missing split key `{s}_images`")));
                    }
                }
                names.clone()
            }
        };
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for s in &split_names {
            let img = &arrays[&format!("{s}_images")];
            let (n, chw) = images_to_chw(img, options.resize).map_err(|e| prefix(e, &format!("{s}_images")))?;
            let lab = match arrays.get(&format!("{s}_labels")) {
                Some(l) => labels_to_u16(l, n).map_err(|e| prefix(e, &format!("{s}_labels")))?,
                None => vec![UNLABELED; n],
            };
            pixels.extend(chw);
            labels.extend(lab);
            splits.push((s.as_str(), n));
        }
        let classes = match arrays.get("class_names") {
            Some(c) => c.to_strings()?,
            None => {
                let max = labels.iter().filter(|&&l| l != UNLABELED).max().map_or(0, |&m| m as usize + 1);
                (0..max).map(|c| c.to_string()).collect()
            }
        };
        Self::new(name, pixels, labels, &splits, classes)
    }

    /// Writes `<split>_images` as `[n,32,32,3]`, `<split>_labels` as `[n,1]`
    /// u16, and `class_names`.
    pub fn export_npz(&self, path: &Path) -> Result<()> {
        let mut arrays = Vec::new();
        for s in &self.manifest.splits {
            let n = s.len();
            let mut hwc = vec![0u8; n * IMAGE_BYTES];
            for (k, i) in s.range().enumerate() {
                let src = self.image(i);
                let dst = &mut hwc[k * IMAGE_BYTES..(k + 1) * IMAGE_BYTES];
                for c in 0..3 {
                    for p in 0..SIDE * SIDE {
                        dst[p * 3 + c] = src[c * SIDE * SIDE + p];
                    }
                }
            }
            arrays.push((format!("{}_images", s.name), NpyArray::from_u8(vec![n, SIDE, SIDE, 3], hwc)?));
            arrays.push((format!("{}_labels", s.name), NpyArray::from_u16(vec![n, 1], &self.labels[s.range()])?));
        }
        arrays.push(("class_names".to_string(), NpyArray::from_strings(&self.manifest.classes)?));
        let tmp = crate::fsutil::temp_sibling(path);
        write_npz(std::io::BufWriter::new(File::create(&tmp)?), &arrays)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

fn prefix(e: Error, key: &str) -> Error {
    match e {
        Error::Validation(m) => Error::Validation(format!("{key}: {m}")),
        Error::UnsupportedLayout(m) => Error::UnsupportedLayout(format!("{key}: {m}")),
        other => other,
    }
}

/// Decodes one image for serving: an NPY array (`[H,W]`, `[H,W,1|3]`,
/// `[3,H,W]` or any batch layout holding exactly one image), or raw
/// 3072 CHW / 1024 grayscale bytes. Returns 3072 CHW bytes.
pub fn decode_image(bytes: &[u8], resize: bool) -> Result<Vec<u8>> {
    if bytes.is_empty() {
        return Err(Error::validation("empty image payload"));
    }
    if bytes.starts_with(b"\x93NUMPY") {
        let mut a = NpyArray::parse(bytes)?;
        let single = match a.shape.as_slice() {
            [_, _] => true,
            [_, _, c] => *c == 3 || *c == 1 && a.shape[0] != 1 || a.shape[0] == 3,
            _ => false,
        };
        if single {
            a.shape.insert(0, 1);
        }
        let (n, chw) = images_to_chw(&a, resize)?;
        if n != 1 {
            return Err(Error::validation(format!("expected one image, got {n}")));
        }
        return Ok(chw);
    }
    match bytes.len() {
        IMAGE_BYTES => Ok(bytes.to_vec()),
        GRAY_BYTES => Ok(bytes.repeat(3)),
        n => Err(Error::validation(format!(
            "image payload of {n} bytes is neither NPY, {IMAGE_BYTES} CHW bytes nor {GRAY_BYTES} grayscale bytes"
        ))),
    }
}

const GRAY_BYTES: usize = SIDE * SIDE;

/// Accepts `[N,H,W]`, `[N,H,W,1]`, `[N,H,W,3]` or `[N,3,H,W]` u8 images.
fn images_to_chw(a: &NpyArray, resize: bool) -> Result<(usize, Vec<u8>)> {
    if a.dtype.descr() != "|u1" {
        return Err(Error::validation(format!("images must be uint8, got {}", a.dtype.descr())));
    }
    let s = &a.shape;
    // (n, h, w, channels, channel-last)
    let (n, h, w, ch, last) = match s.as_slice() {
        [n, h, w] => (*n, *h, *w, 1, true),
        [n, h, w, c @ (1 | 3)] => (*n, *h, *w, *c, true),
        [n, 3, h, w] => (*n, *h, *w, 3, false),
        _ => return Err(Error::UnsupportedLayout(format!("image array shape {s:?}"))),
    };
    if (h != SIDE || w != SIDE) && !resize {
        return Err(Error::validation(format!("images are {h}x{w}; 32x32 required (enable resizing to resample)")));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::validation("empty image array"));
    }
    let at = |i: usize, c: usize, y: usize, x: usize| -> u8 {
        let c = if ch == 1 { 0 } else { c };
        let idx = if last {
            ((i * h + y) * w + x) * ch + c
        } else {
            ((i * 3 + c) * h + y) * w + x
        };
        a.bytes[idx]
    };
    let mut out = vec![0u8; n * IMAGE_BYTES];
    for i in 0..n {
        for c in 0..3 {
            for y in 0..SIDE {
                let sy = y * h / SIDE;
                for x in 0..SIDE {
                    let sx = x * w / SIDE;
                    out[((i * 3 + c) * SIDE + y) * SIDE + x] = at(i, c, sy, sx);
                }
            }
        }
    }
    Ok((n, out))
}

/// `u16::MAX` marks an unlabeled image, which is how exports write them.
fn labels_to_u16(a: &NpyArray, n: usize) -> Result<Vec<u16>> {
    match a.shape.as_slice() {
        [m] | [m, 1] if *m == n => {}
        s => return Err(Error::UnsupportedLayout(format!("labels must be [{n}] or [{n},1], got {s:?}"))),
    }
    a.to_i128()?
        .into_iter()
        .map(|v| {
            u16::try_from(v)
                .map_err(|_| Error::validation(format!("label {v} outside 0..={}", UNLABELED)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arrays(entries: Vec<(&str, NpyArray)>) -> BTreeMap<String, NpyArray> {
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    #[test]
    fn grayscale_is_replicated() {
        let mut px = vec![0u8; 2 * 1024];
        px[1024 + 5] = 200;
        let a = arrays(vec![
            ("train_images", NpyArray::from_u8(vec![2, 32, 32], px).unwrap()),
            ("train_labels", NpyArray::from_u16(vec![2, 1], &[0, 1]).unwrap()),
        ]);
        let c = ImageContainer::from_arrays(&a, "g", &ImportOptions::default()).unwrap();
        assert_eq!(c.len(), 2);
        for ch in 0..3 {
            assert_eq!(c.image(1)[ch * 1024 + 5], 200);
        }
        assert_eq!(c.manifest.classes, vec!["0", "1"]);
    }

    #[test]
    fn channel_last_is_transposed() {
        let px: Vec<u8> = (0..3072).map(|i| (i % 3) as u8 * 100).collect();
        let a = arrays(vec![("test_images", NpyArray::from_u8(vec![1, 32, 32, 3], px).unwrap())]);
        let c = ImageContainer::from_arrays(&a, "rgb", &ImportOptions::default()).unwrap();
        assert!(c.image(0)[..1024].iter().all(|&v| v == 0));
        assert!(c.image(0)[1024..2048].iter().all(|&v| v == 100));
        assert!(c.image(0)[2048..].iter().all(|&v| v == 200));
        assert_eq!(c.labels, vec![UNLABELED]);
        assert_eq!(c.class_distribution()["test"]["unlabeled"], 1);
    }

    #[test]
    fn size_and_dtype_checks() {
        let a = arrays(vec![("train_images", NpyArray::from_u8(vec![1, 28, 28], vec![7; 784]).unwrap())]);
        assert!(ImageContainer::from_arrays(&a, "x", &ImportOptions::default()).is_err());
        let c = ImageContainer::from_arrays(
            &a,
            "x",
            &ImportOptions {
                resize: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(c.pixels.iter().all(|&v| v == 7));
        let f = arrays(vec![("train_images", NpyArray::from_u16(vec![1, 32, 32], &[0; 1024]).unwrap())]);
        assert!(ImageContainer::from_arrays(&f, "x", &ImportOptions::default()).is_err());
        let opts = ImportOptions {
            splits: SplitNaming::Explicit(vec!["train".into(), "val".into()]),
            resize: true,
        };
        assert!(ImageContainer::from_arrays(&a, "x", &opts).is_err());
    }

    #[test]
    fn distribution_and_hash() {
        let c = ImageContainer::new("d", vec![0; 3 * IMAGE_BYTES], vec![0, 0, 1], &[("train", 3)], vec!["a".into(), "b".into()]).unwrap();
        let d = c.class_distribution();
        assert_eq!(d["train"]["0"], 2);
        assert_eq!(d["train"]["1"], 1);
        let mut renamed = c.clone();
        renamed.manifest.name = "other".into();
        assert_eq!(renamed.content_hash(), c.content_hash());
        let mut relabeled = c.clone();
        relabeled.labels[2] = 0;
        assert_ne!(relabeled.content_hash(), c.content_hash());
        assert!(ImageContainer::new("bad", vec![0; IMAGE_BYTES], vec![5], &[("train", 1)], vec!["a".into()]).is_err());
    }
}
