//! Hand-built NPY/NPZ fixtures.

use std::io::Write;
use std::path::Path;

use scarceops::dataset::{ImageContainer, ImportOptions};

/// NPY v1.0 bytes built by hand from a header dict literal.
pub fn npy(dict: &str, data: &[u8]) -> Vec<u8> {
    let mut header = dict.to_string();
    while (10 + header.len() + 1) % 64 != 0 {
        header.push(' ');
    }
    header.push('\n');
    let mut out = b"\x93NUMPY\x01\x00".to_vec();
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(data);
    out
}

pub fn write_zip(path: &Path, members: &[(&str, Vec<u8>)], stored: bool) {
    let mut zip = zip::ZipWriter::new(std::fs::File::create(path).unwrap());
    let method = if stored {
        zip::CompressionMethod::Stored
    } else {
        zip::CompressionMethod::Deflated
    };
    let opts = zip::write::SimpleFileOptions::default().compression_method(method);
    for (name, bytes) in members {
        zip.start_file(*name, opts).unwrap();
        zip.write_all(bytes).unwrap();
    }
    zip.finish().unwrap();
}

pub fn shape_str(shape: &[usize]) -> String {
    if shape.len() == 1 {
        format!("({},)", shape[0])
    } else {
        format!("({})", shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", "))
    }
}

pub fn u8_npy(shape: &[usize], data: &[u8]) -> Vec<u8> {
    npy(
        &format!("{{'descr': '|u1', 'fortran_order': False, 'shape': {}, }}", shape_str(shape)),
        data,
    )
}

/// Writes a `{train,test}` archive in `layout`, imports, exports and
/// re-imports it, asserting the two containers are bit-identical.
pub fn round_trip(layout: &[usize], pixels: &[u8], labels: &[u8], dir: &Path) {
    let n = layout[0];
    let first = dir.join("in.npz");
    write_zip(
        &first,
        &[
            ("train_images.npy", u8_npy(layout, pixels)),
            ("train_labels.npy", u8_npy(&[n], labels)),
            ("test_images.npy", u8_npy(layout, pixels)),
        ],
        false,
    );
    let a = ImageContainer::import_npz(&first, "rt", &ImportOptions::default()).unwrap();
    let second = dir.join("out.npz");
    a.export_npz(&second).unwrap();
    let b = ImageContainer::import_npz(&second, "rt", &ImportOptions::default()).unwrap();
    assert_eq!(a.pixels, b.pixels);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.manifest, b.manifest);
    assert_eq!(a.content_hash(), b.content_hash());
}
