//! Little-endian binary tensor files.
//!
//! `VTG1` holds a token grid: the magic, `u32` frames, rows, cols and width,
//! then `f32` values in row-major `[frame][row][col][dim]` order.
//!
//! `XAT1` holds cross-attention inputs: the magic, `u32` layers, heads, text
//! length, visual tokens and key width, then the query block
//! `[layer][head][text][dim]` followed by the key block
//! `[layer][head][visual][dim]`.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::preserve::{CrossAttentionInputs, VisualTokenGrid};

pub const GRID_MAGIC: &[u8; 4] = b"VTG1";
pub const XATTN_MAGIC: &[u8; 4] = b"XAT1";

fn put_header<W: Write>(out: &mut W, magic: &[u8; 4], dims: &[usize]) -> std::io::Result<()> {
    out.write_all(magic)?;
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| std::io::Error::other(format!("dimension {d} exceeds u32")))?;
        out.write_u32::<LittleEndian>(d)?;
    }
    Ok(())
}

fn put_values<'a, W: Write>(out: &mut W, values: impl Iterator<Item = &'a f32>) -> std::io::Result<()> {
    for &v in values {
        out.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn write_grid<W: Write>(out: &mut W, grid: &VisualTokenGrid) -> std::io::Result<()> {
    let (f, r, c, d) = grid.embeddings().dim();
    put_header(out, GRID_MAGIC, &[f, r, c, d])?;
    put_values(out, grid.embeddings().iter())
}

pub fn write_xattn<W: Write>(out: &mut W, x: &CrossAttentionInputs) -> std::io::Result<()> {
    let dims = [x.layers(), x.heads(), x.text_len(), x.visual_tokens(), x.key_dim()];
    put_header(out, XATTN_MAGIC, &dims)?;
    put_values(out, x.queries().iter())?;
    put_values(out, x.keys().iter())
}

/// Per-token scores as a `VTG1` grid of width 1, narrowed to `f32`.
pub fn write_scores<W: Write>(out: &mut W, scores: &Array3<f64>) -> std::io::Result<()> {
    let (f, r, c) = scores.dim();
    put_header(out, GRID_MAGIC, &[f, r, c, 1])?;
    for &v in scores {
        out.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    cur: Cursor<Vec<u8>>,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path, magic: &[u8; 4]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, bytes, magic)
    }

    fn from_bytes(path: &'a Path, bytes: Vec<u8>, magic: &[u8; 4]) -> Result<Self> {
        let mut r = Self {
            path,
            cur: Cursor::new(bytes),
        };
        let mut found = [0u8; 4];
        let n = r.cur.read(&mut found).map_err(|e| Error::io(path, e))?;
        if n < 4 || &found != magic {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&found[..n]).into_owned(),
            });
        }
        Ok(r)
    }

    fn dims<const N: usize>(&mut self) -> Result<[usize; N]> {
        let mut out = [0usize; N];
        for d in &mut out {
            *d = self
                .cur
                .read_u32::<LittleEndian>()
                .map_err(|_| self.truncated("header"))? as usize;
        }
        Ok(out)
    }

    fn truncated(&self, what: &str) -> Error {
        Error::Shape(format!("{}: truncated {what}", self.path.display()))
    }

    fn values(&mut self, shape: [usize; 4]) -> Result<Array4<f32>> {
        let n: usize = shape.iter().product();
        let mut v = vec![0f32; n];
        self.cur
            .read_f32_into::<LittleEndian>(&mut v)
            .map_err(|_| self.truncated("data"))?;
        Ok(Array4::from_shape_vec(shape, v).expect("length matches shape"))
    }

    fn finish(self) -> Result<()> {
        let rest = self.cur.get_ref().len() as u64 - self.cur.position();
        if rest != 0 {
            return Err(Error::Shape(format!("{}: {rest} trailing bytes", self.path.display())));
        }
        Ok(())
    }
}

fn parse_grid(mut r: Reader<'_>) -> Result<Array4<f32>> {
    let [f, rows, c, d] = r.dims::<4>()?;
    let data = r.values([f, rows, c, d])?;
    r.finish()?;
    Ok(data)
}

fn parse_xattn(mut r: Reader<'_>) -> Result<CrossAttentionInputs> {
    let [l, h, t, v, d] = r.dims::<5>()?;
    let q = r.values([l, h, t, d])?;
    let k = r.values([l, h, v, d])?;
    r.finish()?;
    CrossAttentionInputs::new(q, k)
}

pub fn read_grid(path: &Path) -> Result<VisualTokenGrid> {
    VisualTokenGrid::new(parse_grid(Reader::open(path, GRID_MAGIC)?)?)
}

pub fn read_xattn(path: &Path) -> Result<CrossAttentionInputs> {
    parse_xattn(Reader::open(path, XATTN_MAGIC)?)
}

/// Reads a width-1 `VTG1` score dump.
pub fn read_scores(path: &Path) -> Result<Array3<f64>> {
    let g = parse_grid(Reader::open(path, GRID_MAGIC)?)?;
    let (f, r, c, d) = g.dim();
    if d != 1 {
        return Err(Error::Shape(format!("{}: score dump has width {d}", path.display())));
    }
    Ok(Array3::from_shape_fn((f, r, c), |(a, b, e)| g[[a, b, e, 0]] as f64))
}

/// Parses in-memory `VTG1` bytes; `name` labels errors.
pub fn grid_from_bytes(name: &Path, bytes: Vec<u8>) -> Result<VisualTokenGrid> {
    VisualTokenGrid::new(parse_grid(Reader::from_bytes(name, bytes, GRID_MAGIC)?)?)
}

/// Parses in-memory `XAT1` bytes; `name` labels errors.
pub fn xattn_from_bytes(name: &Path, bytes: Vec<u8>) -> Result<CrossAttentionInputs> {
    parse_xattn(Reader::from_bytes(name, bytes, XATTN_MAGIC)?)
}

fn save(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn save_grid(path: &Path, grid: &VisualTokenGrid) -> Result<()> {
    save(path, |b| write_grid(b, grid))
}

pub fn save_xattn(path: &Path, x: &CrossAttentionInputs) -> Result<()> {
    save(path, |b| write_xattn(b, x))
}

pub fn save_scores(path: &Path, scores: &Array3<f64>) -> Result<()> {
    save(path, |b| write_scores(b, scores))
}
