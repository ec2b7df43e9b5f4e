//! Dense rank-4 video tensors and their on-disk formats.
//!
//! Layout is `[frames, height, width, channels]`, row-major with the channel
//! axis fastest. The binary `VTEN` format is:
//!
//! ```text
//! magic "VTEN" | version u16 = 1 | rank u16 = 4 | 4 x u32 extents | F*H*W*C x f32
//! ```
//!
//! with every integer and float little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"VTEN";
pub const TENSOR_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 16;

/// `[frames, height, width, channels]`.
pub type Dims = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    dims: Dims,
    data: Vec<f32>,
}

fn check_dims(dims: Dims) -> Result<usize> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape(format!("zero extent in {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidShape(format!("element count overflows for {dims:?}")))
}

impl VideoTensor {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        let len = check_dims(dims)?;
        if data.len() != len {
            return Err(Error::InvalidShape(format!(
                "{dims:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidShape(format!("non-finite entry at {pos}")));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f32) -> Result<Self> {
        let len = check_dims(dims)?;
        Ok(Self {
            dims,
            data: vec![value; len],
        })
    }

    /// Builds a tensor by evaluating `f(frame, row, col, channel)`.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Result<Self> {
        let len = check_dims(dims)?;
        let mut data = Vec::with_capacity(len);
        for t in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    for c in 0..dims[3] {
                        data.push(f(t, y, x, c));
                    }
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn frames(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access for in-place kernels. Callers must keep entries finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.dims[1] + y) * self.dims[2] + x) * self.dims[3] + c
    }

    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(t, y, x, c)]
    }

    pub fn set(&mut self, t: usize, y: usize, x: usize, c: usize, value: f32) {
        let i = self.index(t, y, x, c);
        self.data[i] = value;
    }

    /// Contiguous `[height, width, channels]` slice of one frame.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[t * n..(t + 1) * n]
    }

    pub fn ensure_same_dims(&self, other: &VideoTensor, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(pos) => Err(Error::InvalidShape(format!("{what}: non-finite entry at {pos}"))),
        }
    }

    /// Element-wise map evaluated in 64-bit and stored back in 32-bit.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> VideoTensor {
        VideoTensor {
            dims: self.dims,
            data: self.data.iter().map(|&x| f(x as f64) as f32).collect(),
        }
    }

    /// Element-wise combination of two same-shaped tensors in 64-bit.
    pub fn zip_map(&self, other: &VideoTensor, f: impl Fn(f64, f64) -> f64) -> Result<VideoTensor> {
        self.ensure_same_dims(other, "zip_map")?;
        Ok(VideoTensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a as f64, b as f64) as f32)
                .collect(),
        })
    }

    /// `a * self + b * other`, evaluated per entry in 64-bit.
    pub fn lincomb(&self, a: f64, other: &VideoTensor, b: f64) -> Result<VideoTensor> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &VideoTensor) -> Result<f32> {
        self.ensure_same_dims(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Copies frames `[start, start + count)` into a new tensor.
    pub fn slice_frames(&self, start: usize, count: usize) -> Result<VideoTensor> {
        if count == 0 || start + count > self.dims[0] {
            return Err(Error::InvalidShape(format!(
                "frames {start}..{} out of 0..{}",
                start + count,
                self.dims[0]
            )));
        }
        let n = self.dims[1] * self.dims[2] * self.dims[3];
        VideoTensor::new(
            [count, self.dims[1], self.dims[2], self.dims[3]],
            self.data[start * n..(start + count) * n].to_vec(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.extend_from_slice(&4u16.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// Parses one `VTEN` record from the front of `bytes`, returning the
    /// tensor and the number of bytes consumed. `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<(VideoTensor, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(origin, "truncated header"));
        }
        if &bytes[0..4] != TENSOR_MAGIC {
            return Err(Error::format(
                origin,
                format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4])),
            ));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != TENSOR_VERSION {
            return Err(Error::format(origin, format!("unsupported version {version}")));
        }
        let rank = u16::from_le_bytes([bytes[6], bytes[7]]);
        if rank != 4 {
            return Err(Error::format(origin, format!("rank {rank}, expected 4")));
        }
        let mut dims = [0usize; 4];
        for (k, d) in dims.iter_mut().enumerate() {
            let o = 8 + 4 * k;
            *d = u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
        }
        let len = check_dims(dims).map_err(|e| Error::format(origin, e.to_string()))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < 4 * len {
            return Err(Error::format(
                origin,
                format!(
                    "truncated payload: header declares {len} floats, found {}",
                    payload.len() / 4
                ),
            ));
        }
        let data: Vec<f32> = payload[..4 * len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = VideoTensor::new(dims, data).map_err(|e| Error::format(origin, e.to_string()))?;
        Ok((t, HEADER_LEN + 4 * len))
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_tensor(t: &VideoTensor, path: &Path) -> Result<()> {
    write_atomic(path, &t.to_bytes())
}

pub fn load_tensor(path: &Path) -> Result<VideoTensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (t, used) = VideoTensor::from_bytes(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

/// 8-bit quantization used by the frame exporter: `round(255 * clamp(x))`,
/// halves rounded up.
pub fn quantize(x: f32) -> u8 {
    let c = (x as f64).clamp(0.0, 1.0);
    (255.0 * c + 0.5).floor() as u8
}

/// Writes one binary PPM (3 channels) or PGM (1 channel) per frame, named
/// `frame_0000.ppm` / `frame_0000.pgm` in frame order.
pub fn export_frames(t: &VideoTensor, dir: &Path) -> Result<()> {
    let (magic, ext) = match t.channels() {
        3 => ("P6", "ppm"),
        1 => ("P5", "pgm"),
        c => return Err(Error::UnsupportedChannels(c)),
    };
    fs::create_dir_all(dir)?;
    for f in 0..t.frames() {
        let mut bytes = format!("{magic}\n{} {}\n255\n", t.width(), t.height()).into_bytes();
        bytes.extend(t.frame(f).iter().map(|&x| quantize(x)));
        write_atomic(&dir.join(format!("frame_{f:04}.{ext}")), &bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_extent_is_rejected() {
        assert!(matches!(VideoTensor::zeros([0, 1, 1, 1]), Err(Error::InvalidShape(_))));
        assert!(matches!(
            VideoTensor::new([1, 1, 1, 2], vec![0.0]),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn non_finite_data_is_rejected() {
        assert!(VideoTensor::new([1, 1, 1, 1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.vten");
        let mut bytes = VideoTensor::zeros([1, 1, 1, 1]).unwrap().to_bytes();
        bytes[0..4].copy_from_slice(b"XXXX");
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.vten");
        let bytes = VideoTensor::zeros([2, 3, 4, 1]).unwrap().to_bytes();
        // 24 declared floats, keep 23.
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_tensor(&p).unwrap_err();
        assert!(err.to_string().contains("truncated payload"), "{err}");
    }

    #[test]
    fn rank_other_than_four_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.vten");
        let mut bytes = VideoTensor::zeros([1, 1, 1, 1]).unwrap().to_bytes();
        bytes[6] = 3;
        fs::write(&p, bytes).unwrap();
        assert!(load_tensor(&p).unwrap_err().to_string().contains("rank 3"));
    }

    #[test]
    fn header_layout_is_little_endian() {
        let t = VideoTensor::filled([1, 2, 3, 1], 1.0).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[0..4], b"VTEN");
        assert_eq!(&b[4..8], &[1, 0, 4, 0]);
        assert_eq!(&b[8..24], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24 + 6 * 4);
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
    }

    fn read_payload(path: &Path) -> Vec<u8> {
        let bytes = fs::read(path).unwrap();
        // Three header lines.
        let mut newlines = 0;
        let start = bytes
            .iter()
            .position(|&b| {
                if b == b'\n' {
                    newlines += 1;
                }
                newlines == 3
            })
            .unwrap();
        bytes[start + 1..].to_vec()
    }

    #[test]
    fn export_zero_and_one_frames() {
        let dir = tempfile::tempdir().unwrap();
        let zeros = VideoTensor::zeros([1, 2, 2, 3]).unwrap();
        export_frames(&zeros, &dir.path().join("z")).unwrap();
        let p = dir.path().join("z/frame_0000.ppm");
        assert!(fs::read(&p).unwrap().starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(read_payload(&p), vec![0u8; 12]);

        let ones = VideoTensor::filled([2, 2, 2, 3], 1.0).unwrap();
        export_frames(&ones, &dir.path().join("o")).unwrap();
        for f in 0..2 {
            let p = dir.path().join(format!("o/frame_{f:04}.ppm"));
            assert_eq!(read_payload(&p), vec![0xFFu8; 12]);
        }

        let half = VideoTensor::filled([1, 1, 2, 1], 0.5).unwrap();
        export_frames(&half, &dir.path().join("h")).unwrap();
        let p = dir.path().join("h/frame_0000.pgm");
        assert!(fs::read(&p).unwrap().starts_with(b"P5\n2 1\n255\n"));
        assert_eq!(read_payload(&p), vec![128u8, 128]);
    }

    #[test]
    fn export_rejects_two_channels() {
        let dir = tempfile::tempdir().unwrap();
        let t = VideoTensor::zeros([1, 1, 1, 2]).unwrap();
        assert!(matches!(export_frames(&t, dir.path()), Err(Error::UnsupportedChannels(2))));
    }

    fn finite_tensor() -> impl Strategy<Value = VideoTensor> {
        (1usize..3, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(f, h, w, c)| {
            proptest::collection::vec(-1e6f32..1e6f32, f * h * w * c)
                .prop_map(move |data| VideoTensor::new([f, h, w, c], data).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn save_load_is_byte_exact(t in finite_tensor()) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("t.vten");
            save_tensor(&t, &p).unwrap();
            let back = load_tensor(&p).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            let a: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(fs::read(&p).unwrap(), t.to_bytes());
        }

        #[test]
        fn quantization_is_monotone(a in -2f32..2f32, b in -2f32..2f32) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(lo) <= quantize(hi));
        }
    }
}
