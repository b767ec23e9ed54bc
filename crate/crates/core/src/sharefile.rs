//! The `ASSH` share file: a magic, a version, then tagged sections.
//!
//! ```text
//! "ASSH" | version u16 | section count u32 | { tag [4] | length u64 | payload }*
//! ```
//!
//! An `ARRY` payload is `ndims u32 | dims u64* | f64*` in row-major order.
//! `PCAS`, `HKMI` and `LSHI` hold per-party PCA state and index structures;
//! `IMGS` holds image ids and pixel shares, `FEAT` the feature shares.
//! All integers and floats are little endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numeric::Fx;
use crate::secindex::{HkmNode, HkmParams, LshFunctions, LshIndex, LshParams};
use crate::secpca::PcaState;

pub const MAGIC: &[u8; 4] = b"ASSH";
pub const VERSION: u16 = 1;

pub const ARRY: [u8; 4] = *b"ARRY";
pub const PCAS: [u8; 4] = *b"PCAS";
pub const HKMI: [u8; 4] = *b"HKMI";
pub const LSHI: [u8; 4] = *b"LSHI";
pub const IMGS: [u8; 4] = *b"IMGS";
pub const FEAT: [u8; 4] = *b"FEAT";

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub tag: [u8; 4],
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShareFile {
    pub sections: Vec<Section>,
}

impl ShareFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tag: [u8; 4], data: Vec<u8>) -> &mut Self {
        self.sections.push(Section { tag, data });
        self
    }

    /// First section with `tag`.
    pub fn get(&self, tag: [u8; 4]) -> Result<&[u8]> {
        self.sections
            .iter()
            .find(|s| s.tag == tag)
            .map(|s| s.data.as_slice())
            .ok_or_else(|| Error::Format(format!("no {} section", String::from_utf8_lossy(&tag))))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        for s in &self.sections {
            w.write_all(&s.tag)?;
            w.write_all(&(s.data.len() as u64).to_le_bytes())?;
            w.write_all(&s.data)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<ShareFile> {
        let mut head = [0u8; 10];
        r.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(Error::Format("not a share file".into()));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("share file version {version}")));
        }
        let count = u32::from_le_bytes(head[6..10].try_into().unwrap());
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let mut tag = [0u8; 4];
            r.read_exact(&mut tag)?;
            let mut len = [0u8; 8];
            r.read_exact(&mut len)?;
            let len = u64::from_le_bytes(len) as usize;
            let mut data = Vec::new();
            r.by_ref().take(len as u64).read_to_end(&mut data)?;
            if data.len() != len {
                return Err(Error::Format("truncated section".into()));
            }
            sections.push(Section { tag, data });
        }
        Ok(ShareFile { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ShareFile> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Little-endian payload builder.
#[derive(Debug, Default)]
pub struct Enc(pub Vec<u8>);

impl Enc {
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn array(&mut self, dims: &[usize], data: &[Fx]) -> &mut Self {
        self.u32(dims.len() as u32);
        for &d in dims {
            self.u64(d as u64);
        }
        for &v in data {
            self.f64(v);
        }
        self
    }

    /// A matrix, written row-major.
    pub fn matrix(&mut self, m: &DMatrix<Fx>) -> &mut Self {
        let data: Vec<Fx> = m.transpose().as_slice().to_vec();
        self.array(&[m.nrows(), m.ncols()], &data)
    }
}

/// Payload reader; every read checks the remaining length.
pub struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Dec { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("payload too short".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("implausible length {v}")))
    }

    pub fn array(&mut self) -> Result<(Vec<usize>, Vec<Fx>)> {
        let nd = self.u32()? as usize;
        if nd > 8 {
            return Err(Error::Format(format!("{nd} dimensions")));
        }
        let mut dims = Vec::with_capacity(nd);
        for _ in 0..nd {
            dims.push(self.len()?);
        }
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count
            .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::Format("array larger than payload".into()))?;
        let raw = self.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((dims, data))
    }

    pub fn matrix(&mut self) -> Result<DMatrix<Fx>> {
        let (dims, data) = self.array()?;
        match dims[..] {
            [r, c] => Ok(DMatrix::from_row_slice(r, c, &data)),
            _ => Err(Error::Format(format!("expected a matrix, got dims {dims:?}"))),
        }
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

/// A single-array share file.
pub fn save_array(path: &Path, dims: &[usize], data: &[Fx]) -> Result<()> {
    let mut e = Enc::default();
    e.array(dims, data);
    let mut f = ShareFile::new();
    f.push(ARRY, e.0);
    f.save(path)
}

pub fn load_array(path: &Path) -> Result<(Vec<usize>, Vec<Fx>)> {
    let f = ShareFile::load(path)?;
    let mut d = Dec::new(f.get(ARRY)?);
    let out = d.array()?;
    d.finish()?;
    Ok(out)
}

pub fn encode_pca(s: &PcaState) -> Vec<u8> {
    let mut e = Enc::default();
    e.array(&[s.mean.len()], &s.mean).matrix(&s.v);
    e.0
}

pub fn decode_pca(buf: &[u8]) -> Result<PcaState> {
    let mut d = Dec::new(buf);
    let (_, mean) = d.array()?;
    let v = d.matrix()?;
    d.finish()?;
    if v.nrows() != mean.len() {
        return Err(Error::Format("PCA mean and matrix disagree".into()));
    }
    Ok(PcaState { mean, v })
}

fn put_node(e: &mut Enc, n: &HkmNode) {
    e.u32(n.children.len() as u32);
    e.array(&[n.centroid.len()], &n.centroid);
    e.u32(n.ids.len() as u32);
    for &i in &n.ids {
        e.u32(i);
    }
    for c in &n.children {
        put_node(e, c);
    }
}

fn get_node(d: &mut Dec, depth: usize) -> Result<HkmNode> {
    if depth > 4096 {
        return Err(Error::Format("tree too deep".into()));
    }
    let nc = d.u32()? as usize;
    let (_, centroid) = d.array()?;
    let ni = d.u32()? as usize;
    let ids = (0..ni).map(|_| d.u32()).collect::<Result<Vec<_>>>()?;
    let children = (0..nc)
        .map(|_| get_node(d, depth + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(HkmNode {
        centroid,
        children,
        ids,
    })
}

pub fn encode_hkm(root: &HkmNode, params: &HkmParams) -> Vec<u8> {
    let mut e = Enc::default();
    e.u32(params.k as u32)
        .u32(params.leaf_max as u32)
        .u32(params.max_iters as u32)
        .u64(params.seed);
    put_node(&mut e, root);
    e.0
}

pub fn decode_hkm(buf: &[u8]) -> Result<(HkmNode, HkmParams)> {
    let mut d = Dec::new(buf);
    let params = HkmParams {
        k: d.u32()? as usize,
        leaf_max: d.u32()? as usize,
        max_iters: d.u32()? as usize,
        seed: d.u64()?,
    };
    let root = get_node(&mut d, 0)?;
    d.finish()?;
    Ok((root, params))
}

pub fn encode_lsh(idx: &LshIndex) -> Vec<u8> {
    let mut e = Enc::default();
    let p = &idx.params;
    e.u32(p.functions as u32)
        .f64(p.w)
        .f64(p.alpha)
        .u64(p.seed)
        .u64(idx.n as u64);
    e.matrix(&idx.funcs.a)
        .array(&[idx.funcs.b.len()], &idx.funcs.b)
        .array(&[idx.funcs.x.len()], &idx.funcs.x)
        .f64(idx.funcs.w);
    for t in &idx.tables {
        e.u32(t.len() as u32);
        for (&b, ids) in t {
            e.i64(b).u32(ids.len() as u32);
            for &i in ids {
                e.u32(i);
            }
        }
    }
    e.0
}

pub fn decode_lsh(buf: &[u8]) -> Result<LshIndex> {
    let mut d = Dec::new(buf);
    let params = LshParams {
        functions: d.u32()? as usize,
        w: d.f64()?,
        alpha: d.f64()?,
        seed: d.u64()?,
    };
    let n = d.u64()? as usize;
    let a = d.matrix()?;
    let (_, b) = d.array()?;
    let (_, x) = d.array()?;
    let w = d.f64()?;
    if a.nrows() != params.functions || b.len() != params.functions || x.len() != params.functions {
        return Err(Error::Format("hash family size disagrees".into()));
    }
    let mut tables = Vec::with_capacity(params.functions);
    for _ in 0..params.functions {
        let nb = d.u32()? as usize;
        let mut t = BTreeMap::new();
        for _ in 0..nb {
            let b = d.i64()?;
            let ni = d.u32()? as usize;
            let ids = (0..ni).map(|_| d.u32()).collect::<Result<Vec<_>>>()?;
            t.insert(b, ids);
        }
        tables.push(t);
    }
    d.finish()?;
    Ok(LshIndex {
        params,
        funcs: LshFunctions { a, b, w, x },
        tables,
        n,
    })
}
