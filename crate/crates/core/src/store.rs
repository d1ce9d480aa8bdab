//! Single-file label store (`.rlbl`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header    "RLBL" | u16 version=1 | u8 quant | u8 value_mode
//!           | u16 H | u16 W | u32 C | u16 k | u64 record_count        (26 bytes)
//! manifest  record_count x ( u16 id_len | id bytes (UTF-8) | u64 offset | u64 length )
//! records   per pixel, row-major: k x u16 class index, then k quantized values
//! ```
//!
//! `offset` is an absolute byte position in the file. Records are read on
//! demand with positioned reads, so a store opened once can serve any number
//! of concurrent readers.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::augment::CropRegion;
use crate::label_map::ValueMode;
use crate::pooling::{pool_label, PooledTarget};
use crate::quant::QuantFormat;
use crate::sparse::SparseLabelMap;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"RLBL";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 26;
/// Manifest bytes per record, excluding the id itself.
pub const MANIFEST_ENTRY_FIXED_LEN: u64 = 2 + 8 + 8;

/// Shape and encoding shared by every record of a store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub version: u16,
    pub quant: QuantFormat,
    pub value_mode: ValueMode,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub k: usize,
    pub record_count: u64,
}

impl StoreHeader {
    /// Bytes of one record.
    pub fn record_len(&self) -> u64 {
        (self.height * self.width * self.k) as u64 * (2 + self.quant.bytes() as u64)
    }

    fn of(map: &SparseLabelMap, record_count: u64) -> Self {
        StoreHeader {
            version: VERSION,
            quant: map.quant(),
            value_mode: map.value_mode(),
            height: map.height(),
            width: map.width(),
            num_classes: map.num_classes(),
            k: map.k(),
            record_count,
        }
    }

    fn same_shape(&self, map: &SparseLabelMap) -> bool {
        let other = StoreHeader::of(map, self.record_count);
        *self == other
    }

    fn to_bytes(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.quant.code());
        out.push(self.value_mode.code());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.k as u16).to_le_bytes());
        out.extend_from_slice(&self.record_count.to_le_bytes());
        debug_assert_eq!(out.len() as u64, HEADER_LEN);
        out
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:02x?}, expected \"RLBL\"")));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        let quant_code = r.u8()?;
        let quant = QuantFormat::from_code(quant_code)
            .ok_or_else(|| Error::Format(format!("unknown quant code {quant_code}")))?;
        let mode_code = r.u8()?;
        let value_mode = ValueMode::from_code(mode_code)
            .ok_or_else(|| Error::Format(format!("unknown value mode {mode_code}")))?;
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        let num_classes = r.u32()? as usize;
        let k = r.u16()? as usize;
        let record_count = r.u64()?;
        if height == 0 || width == 0 || num_classes == 0 {
            return Err(Error::Format(format!(
                "zero dimension in header ({height}x{width}x{num_classes})"
            )));
        }
        if k == 0 || k > num_classes || num_classes > crate::sparse::MAX_CLASSES {
            return Err(Error::Format(format!("k = {k} invalid for {num_classes} classes")));
        }
        Ok(StoreHeader {
            version,
            quant,
            value_mode,
            height,
            width,
            num_classes,
            k,
            record_count,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub offset: u64,
    pub length: u64,
}

/// An open, read-only label store.
#[derive(Debug)]
pub struct LabelStore {
    path: PathBuf,
    file: File,
    header: StoreHeader,
    manifest: Vec<ManifestEntry>,
    index: HashMap<String, usize>,
}

impl LabelStore {
    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn manifest(&self) -> &[ManifestEntry] {
        &self.manifest
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.index.contains_key(image_id)
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.iter().map(|e| e.image_id.as_str())
    }

    /// Reads one record without touching any other.
    pub fn get_map(&self, image_id: &str) -> Result<SparseLabelMap> {
        let entry = self
            .index
            .get(image_id)
            .map(|&i| &self.manifest[i])
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))?;
        let mut buf = vec![0u8; entry.length as usize];
        read_exact_at(&self.file, &mut buf, entry.offset)
            .map_err(|e| Error::Format(format!("record `{image_id}`: {e}")))?;
        decode_record(&self.header, &buf)
    }

    /// Pooled target for one crop of one image.
    pub fn target(&self, image_id: &str, region: &CropRegion) -> Result<PooledTarget> {
        let map = self.get_map(image_id)?;
        pool_label(&map, region)
    }

    /// Pooled targets for a batch of queries, in input order.
    pub fn batch_targets(&self, queries: &[(&str, CropRegion)]) -> Result<Vec<PooledTarget>> {
        queries
            .iter()
            .map(|(id, region)| self.target(id, region))
            .collect()
    }
}

/// Writes `maps` to `path` and reopens the result.
pub fn write_store<P, S>(path: P, maps: &[(S, SparseLabelMap)]) -> Result<LabelStore>
where
    P: AsRef<Path>,
    S: AsRef<str>,
{
    let path = path.as_ref();
    let bytes = encode_store(maps)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    read_store(path)
}

/// Serializes a whole store into memory.
pub fn encode_store<S: AsRef<str>>(maps: &[(S, SparseLabelMap)]) -> Result<Vec<u8>> {
    let first = maps
        .first()
        .map(|(_, m)| m)
        .ok_or_else(|| Error::InvalidParameter("cannot write an empty store".into()))?;
    let header = StoreHeader::of(first, maps.len() as u64);
    if header.height > u16::MAX as usize || header.width > u16::MAX as usize {
        return Err(Error::InvalidShape(format!(
            "{}x{} exceeds the 16-bit spatial limit",
            header.height, header.width
        )));
    }

    let mut seen = HashMap::with_capacity(maps.len());
    for (id, map) in maps {
        let id = id.as_ref();
        if !header.same_shape(map) {
            return Err(Error::HeterogeneousShapes(format!(
                "`{id}` is {}x{}x{} k={} {} {:?}, store is {}x{}x{} k={} {} {:?}",
                map.height(),
                map.width(),
                map.num_classes(),
                map.k(),
                map.quant(),
                map.value_mode(),
                header.height,
                header.width,
                header.num_classes,
                header.k,
                header.quant,
                header.value_mode
            )));
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::InvalidParameter(format!("image id too long ({} bytes)", id.len())));
        }
        if seen.insert(id, ()).is_some() {
            return Err(Error::InvalidParameter(format!("duplicate image id `{id}`")));
        }
    }

    let manifest_len: u64 = maps
        .iter()
        .map(|(id, _)| MANIFEST_ENTRY_FIXED_LEN + id.as_ref().len() as u64)
        .sum();
    let record_len = header.record_len();
    let mut out = header.to_bytes();
    let mut offset = HEADER_LEN + manifest_len;
    for (id, _) in maps {
        let id = id.as_ref();
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&record_len.to_le_bytes());
        offset += record_len;
    }
    for (_, map) in maps {
        encode_record(map, &mut out);
    }
    Ok(out)
}

fn encode_record(map: &SparseLabelMap, out: &mut Vec<u8>) {
    let k = map.k();
    let quant = map.quant();
    for (idx, vals) in map.indices().chunks_exact(k).zip(map.raw_values().chunks_exact(k)) {
        for i in idx {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for &v in vals {
            quant.write_le(v, out);
        }
    }
}

fn decode_record(header: &StoreHeader, buf: &[u8]) -> Result<SparseLabelMap> {
    if buf.len() as u64 != header.record_len() {
        return Err(Error::Format(format!(
            "record is {} bytes, expected {}",
            buf.len(),
            header.record_len()
        )));
    }
    let k = header.k;
    let vb = header.quant.bytes();
    let n = header.height * header.width;
    let mut indices = Vec::with_capacity(n * k);
    let mut values = Vec::with_capacity(n * k);
    for pixel in buf.chunks_exact(k * (2 + vb)) {
        let (idx, vals) = pixel.split_at(2 * k);
        indices.extend(idx.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])));
        values.extend(vals.chunks_exact(vb).map(|b| header.quant.read_le(b)));
    }
    SparseLabelMap::from_parts(
        header.height,
        header.width,
        header.num_classes,
        k,
        indices,
        values,
        header.quant,
        header.value_mode,
    )
    .map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("corrupt record: {m}")),
        other => Error::Format(format!("corrupt record: {other}")),
    })
}

/// Opens a store, validating the header and manifest.
pub fn read_store(path: impl AsRef<Path>) -> Result<LabelStore> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::Format(format!("cannot open label store {}: {e}", path.display())))?;
    let file_len = file.metadata()?.len();

    let mut head = [0u8; HEADER_LEN as usize];
    read_exact_at(&file, &mut head, 0)
        .map_err(|_| Error::Format(format!("truncated header ({file_len} bytes)")))?;
    let header = StoreHeader::parse(&head)?;

    // The manifest is at most 18 + 65535 bytes per record; read what fits.
    let manifest_cap = header
        .record_count
        .saturating_mul(MANIFEST_ENTRY_FIXED_LEN + u16::MAX as u64)
        .min(file_len.saturating_sub(HEADER_LEN));
    let mut manifest_bytes = vec![0u8; manifest_cap as usize];
    read_exact_at(&file, &mut manifest_bytes, HEADER_LEN)?;

    let mut r = Reader::new(&manifest_bytes);
    let count = usize::try_from(header.record_count)
        .map_err(|_| Error::Format("record count does not fit in memory".into()))?;
    let mut manifest = Vec::with_capacity(count.min(1 << 20));
    let mut index = HashMap::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let id_len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|e| Error::Format(format!("manifest entry {i}: id is not UTF-8: {e}")))?
            .to_string();
        let offset = r.u64()?;
        let length = r.u64()?;
        if index.insert(id.clone(), i).is_some() {
            return Err(Error::Format(format!("duplicate image id `{id}` in manifest")));
        }
        manifest.push(ManifestEntry {
            image_id: id,
            offset,
            length,
        });
    }
    let data_start = HEADER_LEN + r.position() as u64;

    let mut spans: Vec<(u64, u64)> = Vec::with_capacity(manifest.len());
    for e in &manifest {
        if e.length != header.record_len() {
            return Err(Error::Format(format!(
                "record `{}` has length {}, header implies {}",
                e.image_id,
                e.length,
                header.record_len()
            )));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .ok_or_else(|| Error::Format(format!("record `{}` offset overflows", e.image_id)))?;
        if e.offset < data_start || end > file_len {
            return Err(Error::Format(format!(
                "record `{}` spans [{}, {end}) outside the data section [{data_start}, {file_len})",
                e.image_id, e.offset
            )));
        }
        spans.push((e.offset, end));
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(Error::Format("overlapping records".into()));
    }
    // A damaged record count leaves unclaimed bytes before or after the records.
    let first = spans.first().map_or(data_start, |s| s.0);
    let last = spans.last().map_or(data_start, |s| s.1);
    if first != data_start || last != file_len {
        return Err(Error::Format(format!(
            "records cover [{first}, {last}) but the data section is [{data_start}, {file_len})"
        )));
    }

    Ok(LabelStore {
        path: path.to_path_buf(),
        file,
        header,
        manifest,
        index,
    })
}

/// Convenience: `read_store(path)?.get_map(id)`.
pub fn get_map(store: &LabelStore, image_id: &str) -> Result<SparseLabelMap> {
    store.get_map(image_id)
}

/// Size of the file a store with these records would occupy.
pub fn store_file_len(header: &StoreHeader, ids: &[&str]) -> u64 {
    HEADER_LEN
        + ids
            .iter()
            .map(|id| MANIFEST_ENTRY_FIXED_LEN + id.len() as u64 + header.record_len())
            .sum::<u64>()
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_exact_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset) {
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn position(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_map::DenseLabelMap;
    use crate::sparse::encode_sparse;

    fn map(seed: u64, k: usize, quant: QuantFormat) -> SparseLabelMap {
        let dense = DenseLabelMap::from_fn(3, 4, 6, ValueMode::RawScores, |r, c, k| {
            ((seed as usize * 31 + r * 7 + c * 3 + k * 5) % 13) as f64 * 0.4
        })
        .unwrap();
        encode_sparse(&dense, k, quant).unwrap()
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let bytes = encode_store(&[("a", map(1, 2, QuantFormat::F16))]).unwrap();
        assert_eq!(&bytes[..4], b"RLBL");
        assert_eq!(&bytes[4..6], &[1, 0]); // version
        assert_eq!(bytes[6], 1); // f16
        assert_eq!(bytes[7], 1); // probabilities
        assert_eq!(&bytes[8..10], &[3, 0]); // H
        assert_eq!(&bytes[10..12], &[4, 0]); // W
        assert_eq!(&bytes[12..16], &[6, 0, 0, 0]); // C
        assert_eq!(&bytes[16..18], &[2, 0]); // k
        assert_eq!(&bytes[18..26], &[1, 0, 0, 0, 0, 0, 0, 0]); // count
        assert_eq!(&bytes[26..28], &[1, 0]); // id len
        assert_eq!(bytes[28], b'a');
        let offset = u64::from_le_bytes(bytes[29..37].try_into().unwrap());
        let length = u64::from_le_bytes(bytes[37..45].try_into().unwrap());
        assert_eq!(offset, 45);
        assert_eq!(length, 3 * 4 * 2 * (2 + 2));
        assert_eq!(bytes.len() as u64, offset + length);
    }

    #[test]
    fn rejects_heterogeneous_and_duplicate() {
        let a = map(1, 2, QuantFormat::F32);
        let b = map(2, 3, QuantFormat::F32);
        assert!(matches!(
            encode_store(&[("a", a.clone()), ("b", b)]),
            Err(Error::HeterogeneousShapes(_))
        ));
        assert!(encode_store(&[("a", a.clone()), ("a", a)]).is_err());
        assert!(encode_store::<&str>(&[]).is_err());
    }

    #[test]
    fn record_encoding_orders_indices_before_values() {
        let m = map(3, 2, QuantFormat::F8);
        let mut out = Vec::new();
        encode_record(&m, &mut out);
        let first = &out[..6];
        assert_eq!(u16::from_le_bytes([first[0], first[1]]), m.indices()[0]);
        assert_eq!(u16::from_le_bytes([first[2], first[3]]), m.indices()[1]);
        assert_eq!(first[4] as u32, m.raw_values()[0]);
        assert_eq!(first[5] as u32, m.raw_values()[1]);
    }
}
