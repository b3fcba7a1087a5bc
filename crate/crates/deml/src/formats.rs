//! Binary dataset (`DMLD`) and checkpoint (`DMLC`) envelopes, and the
//! plain-text class split manifest. All integers and floats are
//! little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use deml_core::episodes::{LabeledDataset, MetaSplit};
use deml_core::models::ParamStore;
use deml_core::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"DMLD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMLC";
pub const VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}, expected {VERSION}")]
    Version(u16),
    #[error("unsupported dtype {0}, only 0 (f64) is defined")]
    Dtype(u8),
    #[error("file is truncated")]
    Truncated,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(io::Error),
    #[error(transparent)]
    Core(#[from] deml_core::Error),
}

impl From<io::Error> for FormatError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FormatError::Truncated
        } else {
            FormatError::Io(e)
        }
    }
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.0.read_exact(&mut buf)?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            out.push(f64::from_le_bytes(self.bytes()?));
        }
        Ok(out)
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.bytes::<4>()?;
        if &found != magic {
            return Err(FormatError::BadMagic {
                expected: *magic,
                found,
            });
        }
        match self.u16()? {
            VERSION => Ok(()),
            v => Err(FormatError::Version(v)),
        }
    }
    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()?;
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }
    fn expect_end(&mut self) -> Result<()> {
        let mut extra = [0u8; 1];
        match self.0.read(&mut extra)? {
            0 => Ok(()),
            _ => Err(FormatError::Invalid("trailing bytes after payload".into())),
        }
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| FormatError::Invalid(format!("{what} {v} does not fit in u32")))
}

fn write_dims(w: &mut impl Write, dims: &[usize]) -> Result<()> {
    let rank = u8::try_from(dims.len())
        .map_err(|_| FormatError::Invalid(format!("rank {} exceeds 255", dims.len())))?;
    w.write_all(&[rank])?;
    for &d in dims {
        w.write_all(&to_u32(d, "dimension")?.to_le_bytes())?;
    }
    Ok(())
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// `dims` in the header are the per-example shape.
pub fn write_dataset(w: &mut impl Write, dataset: &LabeledDataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&to_u32(dataset.len(), "example count")?.to_le_bytes())?;
    write_dims(w, dataset.example_shape())?;
    w.write_all(&[DTYPE_F64])?;
    write_f64s(w, dataset.examples().data())?;
    for l in dataset.labels() {
        w.write_all(&l.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dataset(r: impl Read) -> Result<LabeledDataset> {
    let mut r = Reader(r);
    r.header(DATASET_MAGIC)?;
    let n = r.u32()? as usize;
    let dims = r.dims()?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F64 {
        return Err(FormatError::Dtype(dtype));
    }
    let per = dims.iter().product::<usize>();
    let payload = r.f64s(n * per)?;
    let labels = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    r.expect_end()?;
    let mut shape = vec![n];
    shape.extend(dims);
    Ok(LabeledDataset::new(Tensor::new(shape, payload)?, labels)?)
}

/// Tensors in name order; the store's init seed is not kept.
pub fn write_checkpoint(w: &mut impl Write, store: &ParamStore) -> Result<()> {
    let count = u16::try_from(store.len()).map_err(|_| {
        FormatError::Invalid(format!("{} tensors exceed the u16 count", store.len()))
    })?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| FormatError::Invalid(format!("tensor name `{name}` is too long")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_dims(w, t.shape())?;
        write_f64s(w, t.data())?;
    }
    Ok(())
}

pub fn read_checkpoint(r: impl Read) -> Result<ParamStore> {
    let mut r = Reader(r);
    r.header(CHECKPOINT_MAGIC)?;
    let count = r.u16()?;
    let mut store = ParamStore::new(0);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let mut name = vec![0u8; len];
        r.0.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| FormatError::Invalid("tensor name is not UTF-8".into()))?;
        let dims = r.dims()?;
        let data = r.f64s(dims.iter().product())?;
        if store
            .insert(name.clone(), Tensor::new(dims, data)?)
            .is_some()
        {
            return Err(FormatError::Invalid(format!("duplicate tensor `{name}`")));
        }
    }
    r.expect_end()?;
    Ok(store)
}

pub fn format_split(split: &MetaSplit) -> String {
    let line = |ids: &[u32]| ids.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
    format!(
        "train:{}\nval:{}\ntest:{}\n",
        line(&split.train),
        line(&split.val),
        line(&split.test)
    )
}

pub fn parse_split(text: &str) -> Result<MetaSplit> {
    let mut parts: [Option<Vec<u32>>; 3] = [None, None, None];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (key, ids) = line.split_once(':').ok_or_else(|| {
            FormatError::Invalid(format!("split line {}: expected `role:ids`", i + 1))
        })?;
        let slot = match key.trim() {
            "train" => 0,
            "val" => 1,
            "test" => 2,
            other => {
                return Err(FormatError::Invalid(format!(
                    "split line {}: unknown role `{other}`",
                    i + 1
                )))
            }
        };
        if parts[slot].is_some() {
            return Err(FormatError::Invalid(format!(
                "split line {}: role `{}` repeated",
                i + 1,
                key.trim()
            )));
        }
        let ids = ids
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<u32>().map_err(|_| {
                    FormatError::Invalid(format!("split line {}: bad class id `{s}`", i + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        parts[slot] = Some(ids);
    }
    let [train, val, test] = parts;
    let missing =
        |name: &str| FormatError::Invalid(format!("split manifest has no `{name}:` line"));
    Ok(MetaSplit::new(
        train.ok_or_else(|| missing("train"))?,
        val.ok_or_else(|| missing("val"))?,
        test.ok_or_else(|| missing("test"))?,
    )?)
}

pub fn save_dataset(path: &Path, dataset: &LabeledDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, dataset)?;
    Ok(w.flush()?)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, store)?;
    Ok(w.flush()?)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

pub fn save_split(path: &Path, split: &MetaSplit) -> Result<()> {
    Ok(std::fs::write(path, format_split(split))?)
}

pub fn load_split(path: &Path) -> Result<MetaSplit> {
    parse_split(&std::fs::read_to_string(path)?)
}
