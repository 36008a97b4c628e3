//! Binary feature/mask/parameter files and JSON manifests.
//!
//! All integers and floats are little-endian.
//!
//! * Feature map: `"FSFM"`, version `0x01`, dtype `0x01` (f32), rank `3`,
//!   three `u32` dims `(d, h, w)`, then `d*h*w` f32 values row-major.
//! * Mask: `"FSMK"`, version `0x01`, two `u32` dims `(H, W)`, then `H*W`
//!   bytes in `{0, 1}`.
//! * Head parameters: `"FSHP"`, version `0x01`, `d` as `u32`, then the four
//!   parameter tensors in declaration order, each as a `u8` rank, `rank`
//!   `u32` dims and f32 data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episode::{FoldSplit, LabeledExample};
use crate::error::{FsError, Result};
use crate::head::HeadParams;
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"FSFM";
pub const MASK_MAGIC: &[u8; 4] = b"FSMK";
pub const PARAMS_MAGIC: &[u8; 4] = b"FSHP";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x01;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(FsError::format(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let at = self.pos as u64;
        let got = self.take(4, "magic")?;
        if got != want {
            return Err(FsError::format(
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(want)
                ),
            ));
        }
        let at = self.pos as u64;
        let v = self.u8("version")?;
        if v != VERSION {
            return Err(FsError::format(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let at = self.pos;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| FsError::format(at as u64, "size overflow"))?, what)?;
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(FsError::format((at + 4 * i) as u64, format!("non-finite {what} value")));
        }
        Ok(vals)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(FsError::format(
                self.pos as u64,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn dims_product(dims: &[u32], at: usize) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| {
            if d == 0 {
                None
            } else {
                acc.checked_mul(d as usize)
            }
        })
        .ok_or_else(|| FsError::format(at as u64, format!("invalid dims {dims:?}")))
}

fn push_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_features(t: &Tensor) -> Result<Vec<u8>> {
    let (d, h, w) = t.chw()?;
    let mut out = Vec::with_capacity(20 + 4 * t.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&[VERSION, DTYPE_F32, 3]);
    for x in [d, h, w] {
        out.extend_from_slice(&(x as u32).to_le_bytes());
    }
    push_f32s(&mut out, t.data());
    Ok(out)
}

pub fn decode_features(buf: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(buf);
    r.magic(FEATURE_MAGIC)?;
    let at = r.pos;
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(FsError::format(at as u64, format!("unsupported dtype code {dtype}")));
    }
    let at = r.pos;
    let rank = r.u8("rank")?;
    if rank != 3 {
        return Err(FsError::format(at as u64, format!("feature maps are rank 3, got {rank}")));
    }
    let at = r.pos;
    let dims = [r.u32("dims")?, r.u32("dims")?, r.u32("dims")?];
    let n = dims_product(&dims, at)?;
    let data = r.f32s(n, "feature")?;
    r.finish()?;
    Tensor::new(dims.iter().map(|&d| d as usize).collect(), data)
}

pub fn encode_mask(m: &BinaryMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + m.len());
    out.extend_from_slice(MASK_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(m.height() as u32).to_le_bytes());
    out.extend_from_slice(&(m.width() as u32).to_le_bytes());
    out.extend_from_slice(m.data());
    out
}

pub fn decode_mask(buf: &[u8]) -> Result<BinaryMask> {
    let mut r = Reader::new(buf);
    r.magic(MASK_MAGIC)?;
    let at = r.pos;
    let dims = [r.u32("dims")?, r.u32("dims")?];
    let n = dims_product(&dims, at)?;
    let at = r.pos;
    let data = r.take(n, "mask cells")?.to_vec();
    if let Some(i) = data.iter().position(|&v| v > 1) {
        return Err(FsError::format((at + i) as u64, format!("mask byte {} is not 0 or 1", data[i])));
    }
    r.finish()?;
    BinaryMask::new(dims[0] as usize, dims[1] as usize, data)
}

pub fn encode_params(p: &HeadParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(p.feature_dim() as u32).to_le_bytes());
    for t in p.tensors() {
        out.push(t.rank() as u8);
        for &s in t.shape() {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        push_f32s(&mut out, t.data());
    }
    out
}

pub fn decode_params(buf: &[u8]) -> Result<HeadParams> {
    let mut r = Reader::new(buf);
    r.magic(PARAMS_MAGIC)?;
    let d_at = r.pos;
    let d = r.u32("feature dim")?;
    let mut tensors = Vec::with_capacity(4);
    for name in ["conv1 weights", "conv1 bias", "conv2 weights", "conv2 bias"] {
        let at = r.pos;
        let rank = r.u8("rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(FsError::format(at as u64, format!("{name}: bad rank {rank}")));
        }
        let at = r.pos;
        let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let n = dims_product(&dims, at)?;
        let data = r.f32s(n, name)?;
        tensors.push(Tensor::new(dims.iter().map(|&x| x as usize).collect(), data)?);
    }
    r.finish()?;
    let mut it = tensors.into_iter();
    let p = HeadParams::new(
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    )
    .map_err(|e| FsError::format(d_at as u64, e.to_string()))?;
    if p.feature_dim() != d as usize {
        return Err(FsError::format(
            d_at as u64,
            format!("header says d={d}, tensors say d={}", p.feature_dim()),
        ));
    }
    Ok(p)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| FsError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| FsError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| FsError::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    decode_features(&read_bytes(path)?)
}

pub fn write_features(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &encode_features(t)?)
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    decode_mask(&read_bytes(path)?)
}

pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    write_bytes(path, &encode_mask(m))
}

pub fn read_params(path: &Path) -> Result<HeadParams> {
    decode_params(&read_bytes(path)?)
}

pub fn write_params(path: &Path, p: &HeadParams) -> Result<()> {
    write_bytes(path, &encode_params(p))
}

/// One manifest row. Paths are relative to the manifest's directory unless
/// absolute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub class_id: u32,
    pub features: PathBuf,
    pub mask: PathBuf,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| FsError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        FsError::Data(format!("{}: invalid manifest: {e}", path.display()))
    })
}

/// Loads every example a manifest lists, validating file presence first.
pub fn load_dataset(manifest: &Path) -> Result<Vec<LabeledExample>> {
    let entries = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut out = Vec::with_capacity(entries.len());
    for e in &entries {
        let fpath = resolve(base, &e.features);
        let mpath = resolve(base, &e.mask);
        for p in [&fpath, &mpath] {
            if !p.is_file() {
                return Err(FsError::Data(format!(
                    "manifest {} references missing file {}",
                    manifest.display(),
                    p.display()
                )));
            }
        }
        let features = read_features(&fpath)?;
        let mask = read_mask(&mpath)?;
        out.push(LabeledExample::new(e.class_id, features, mask)?);
    }
    crate::episode::validate_dataset(&out)?;
    Ok(out)
}

/// Writes one feature and one mask file per example under `dir` plus a
/// `manifest.json` with relative paths. Returns the manifest path.
pub fn write_dataset(dir: &Path, dataset: &[LabeledExample]) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, e) in dataset.iter().enumerate() {
        let features = PathBuf::from(format!("features/{i:06}.fsfm"));
        let mask = PathBuf::from(format!("masks/{i:06}.fsmk"));
        write_features(&dir.join(&features), &e.features)?;
        write_mask(&dir.join(&mask), &e.mask)?;
        entries.push(ManifestEntry {
            class_id: e.class_id,
            features,
            mask,
        });
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    write_bytes(&path, json.as_bytes())?;
    Ok(path)
}

/// Reads a fold file holding either one fold object or an array of them.
pub fn read_folds(path: &Path) -> Result<Vec<FoldSplit>> {
    let text = fs::read_to_string(path).map_err(|e| FsError::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| FsError::Data(format!("{}: invalid fold file: {e}", path.display())))?;
    let folds: Vec<FoldSplit> = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|f| vec![f])
    }
    .map_err(|e| FsError::Data(format!("{}: invalid fold file: {e}", path.display())))?;
    for f in &folds {
        f.validate()?;
    }
    Ok(folds)
}

pub fn write_folds(path: &Path, folds: &[FoldSplit]) -> Result<()> {
    let json = serde_json::to_string_pretty(folds).expect("folds serialize");
    write_bytes(path, json.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn feature_roundtrip_is_bit_exact() {
        let mut rng = Rng::new(1);
        let t = Tensor::randn(vec![3, 4, 5], 1.0, &mut rng);
        let bytes = encode_features(&t).unwrap();
        assert_eq!(&bytes[..4], b"FSFM");
        assert_eq!(bytes.len(), 4 + 3 + 12 + 60 * 4);
        let back = decode_features(&bytes).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn feature_header_layout() {
        let t = Tensor::new(vec![1, 1, 2], vec![1.0, -2.5]).unwrap();
        let b = encode_features(&t).unwrap();
        assert_eq!(
            b[..19],
            [b'F', b'S', b'F', b'M', 1, 1, 3, 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]
        );
        assert_eq!(b[19..23], 1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_file_is_format_error() {
        let t = Tensor::zeros(vec![2, 2, 2]);
        let bytes = encode_features(&t).unwrap();
        for cut in [0, 3, 5, 10, bytes.len() - 1] {
            match decode_features(&bytes[..cut]) {
                Err(FsError::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let m = encode_mask(&BinaryMask::ones(3, 3));
        assert!(matches!(decode_mask(&m[..12]), Err(FsError::Format { .. })));
    }

    #[test]
    fn bad_magic_version_and_values() {
        let mut b = encode_mask(&BinaryMask::ones(2, 2));
        b[0] = b'X';
        assert!(matches!(decode_mask(&b), Err(FsError::Format { offset: 0, .. })));
        let mut b = encode_mask(&BinaryMask::ones(2, 2));
        b[4] = 2;
        assert!(matches!(decode_mask(&b), Err(FsError::Format { offset: 4, .. })));
        let mut b = encode_mask(&BinaryMask::ones(2, 2));
        b[14] = 7;
        assert!(matches!(decode_mask(&b), Err(FsError::Format { offset: 14, .. })));
        let mut b = encode_features(&Tensor::zeros(vec![1, 1, 1])).unwrap();
        b[19..23].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_features(&b), Err(FsError::Format { offset: 19, .. })));
        let mut b = encode_features(&Tensor::zeros(vec![1, 1, 1])).unwrap();
        b.push(0);
        assert!(decode_features(&b).is_err());
    }

    #[test]
    fn params_roundtrip() {
        let mut rng = Rng::new(2);
        let p = HeadParams::init(5, &mut rng);
        let bytes = encode_params(&p);
        assert_eq!(&bytes[..4], b"FSHP");
        assert_eq!(decode_params(&bytes).unwrap(), p);
        assert!(matches!(
            decode_params(&bytes[..bytes.len() - 2]),
            Err(FsError::Format { .. })
        ));
    }

    #[test]
    fn manifest_with_missing_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![ManifestEntry {
            class_id: 0,
            features: "nope.fsfm".into(),
            mask: "nope.fsmk".into(),
        }];
        let mpath = dir.path().join("manifest.json");
        fs::write(&mpath, serde_json::to_string(&entries).unwrap()).unwrap();
        match load_dataset(&mpath) {
            Err(FsError::Data(msg)) => assert!(msg.contains("nope.fsfm"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dataset_and_folds_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(3);
        let data: Vec<_> = (0..4)
            .map(|i| {
                LabeledExample::new(
                    i % 2,
                    Tensor::randn(vec![2, 3, 3], 1.0, &mut rng),
                    BinaryMask::from_fn(6, 6, |y, x| (y + x + i as usize).is_multiple_of(3)),
                )
                .unwrap()
            })
            .collect();
        let manifest = write_dataset(dir.path(), &data).unwrap();
        assert_eq!(load_dataset(&manifest).unwrap(), data);

        let folds = FoldSplit::cross_validation(4, 2).unwrap();
        let fp = dir.path().join("folds.json");
        write_folds(&fp, &folds).unwrap();
        assert_eq!(read_folds(&fp).unwrap(), folds);
        fs::write(&fp, r#"{"fold": 3, "test_classes": [1], "train_classes": [0, 2]}"#).unwrap();
        assert_eq!(read_folds(&fp).unwrap()[0].fold, 3);
        fs::write(&fp, r#"{"fold": 3, "test_classes": [1], "train_classes": [1]}"#).unwrap();
        assert!(read_folds(&fp).is_err());
    }

    proptest! {
        #[test]
        fn mask_and_feature_roundtrip(
            h in 1usize..6, w in 1usize..6, bits in proptest::collection::vec(0u8..2, 36),
            vals in proptest::collection::vec(-1e6f32..1e6, 36),
        ) {
            let m = BinaryMask::new(h, w, bits[..h * w].to_vec()).unwrap();
            prop_assert_eq!(decode_mask(&encode_mask(&m)).unwrap(), m);
            let t = Tensor::new(vec![1, h, w], vals[..h * w].to_vec()).unwrap();
            prop_assert_eq!(decode_features(&encode_features(&t).unwrap()).unwrap(), t);
        }
    }
}
