//! GPTQPACK container and the dequantize-on-the-fly matrix-vector product.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic       4 bytes  "GPQ1"
//! rows        u32
//! cols        u32
//! bits        u8       2, 3, 4 or 8
//! group_size  u32      0 = whole row
//! grids       rows × groups × (scale f32, zero u8)
//! codes       rows × ceil(cols·bits / 8) bytes
//! ```
//!
//! Column `j` of a row occupies stream bits `[j·bits, (j+1)·bits)`; stream bit
//! `k` is bit `k mod 8` of byte `k / 8`. Each row is padded to a byte boundary.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::error::{QuantError, Result};
use crate::grid::{check_bits, groups_per_row, max_code, GroupGrids, QuantGrid, QuantizedLayer};
use crate::rng::SeededRng;

pub const GPTQPACK_MAGIC: &[u8; 4] = b"GPQ1";
pub const HEADER_LEN: usize = 4 + 4 + 4 + 1 + 4;
const GRID_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeights {
    rows: usize,
    cols: usize,
    bits: u32,
    group_size: usize,
    grids: Vec<QuantGrid>,
    payload: Vec<u8>,
}

pub fn row_bytes(cols: usize, bits: u32) -> usize {
    (cols * bits as usize).div_ceil(8)
}

/// Exact container size for a layer of the given shape.
pub fn packed_len(rows: usize, cols: usize, bits: u32, group_size: usize) -> usize {
    HEADER_LEN + rows * groups_per_row(cols, group_size) * GRID_LEN + rows * row_bytes(cols, bits)
}

/// Appends `codes` LSB-first at `bits` per code, padding the tail to a byte.
fn pack_row(codes: &[u8], bits: u32, out: &mut Vec<u8>) {
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &c in codes {
        acc |= (c as u64) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
}

fn unpack_row(src: &[u8], bits: u32, cols: usize, out: &mut Vec<u8>) {
    let mask = max_code(bits) as u64;
    let mut acc: u64 = 0;
    let mut avail = 0u32;
    let mut bytes = src.iter();
    for _ in 0..cols {
        while avail < bits {
            acc |= (*bytes.next().expect("row length checked") as u64) << avail;
            avail += 8;
        }
        out.push((acc & mask) as u8);
        acc >>= bits;
        avail -= bits;
    }
}

pub fn pack(q: &QuantizedLayer) -> Result<PackedWeights> {
    let bits = q.bits();
    check_bits(bits)?;
    let mut payload = Vec::with_capacity(q.rows() * row_bytes(q.cols(), bits));
    for r in 0..q.rows() {
        pack_row(q.row_codes(r), bits, &mut payload);
    }
    Ok(PackedWeights {
        rows: q.rows(),
        cols: q.cols(),
        bits,
        group_size: q.grids().group_size(),
        grids: q.grids().all().to_vec(),
        payload,
    })
}

/// Decodes a serialized container back into a layer.
pub fn unpack(bytes: &[u8]) -> Result<QuantizedLayer> {
    PackedWeights::from_bytes(bytes)?.to_layer()
}

impl PackedWeights {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn grids(&self) -> &[QuantGrid] {
        &self.grids
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn row_payload(&self, r: usize) -> &[u8] {
        let rb = row_bytes(self.cols, self.bits);
        &self.payload[r * rb..(r + 1) * rb]
    }

    pub fn groups_per_row(&self) -> usize {
        groups_per_row(self.cols, self.group_size)
    }

    pub fn encoded_len(&self) -> usize {
        packed_len(self.rows, self.cols, self.bits, self.group_size)
    }

    pub fn metadata_bytes(&self) -> usize {
        self.grids.len() * GRID_LEN
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(GPTQPACK_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.push(self.bits as u8);
        out.extend_from_slice(&(self.group_size as u32).to_le_bytes());
        for g in &self.grids {
            out.extend_from_slice(&g.scale().to_le_bytes());
            out.push(g.zero() as u8);
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != GPTQPACK_MAGIC {
            return Err(QuantError::BadMagic {
                expected: "GPQ1".into(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(QuantError::LengthMismatch {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let rows = u32_at(4) as usize;
        let cols = u32_at(8) as usize;
        let bits = bytes[12] as u32;
        let group_size = u32_at(13) as usize;
        check_bits(bits)?;
        let expected = packed_len(rows, cols, bits, group_size);
        if bytes.len() != expected {
            return Err(QuantError::LengthMismatch {
                expected,
                found: bytes.len(),
            });
        }
        let ngrids = rows * groups_per_row(cols, group_size);
        let grid_end = HEADER_LEN + ngrids * GRID_LEN;
        let grids = bytes[HEADER_LEN..grid_end]
            .chunks_exact(GRID_LEN)
            .map(|c| {
                let scale = f32::from_le_bytes(c[..4].try_into().unwrap());
                QuantGrid::new(bits, scale, c[4] as u32)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rows,
            cols,
            bits,
            group_size,
            grids,
            payload: bytes[grid_end..].to_vec(),
        })
    }

    pub fn to_layer(&self) -> Result<QuantizedLayer> {
        let mut codes = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            unpack_row(self.row_payload(r), self.bits, self.cols, &mut codes);
        }
        let grids = GroupGrids::new(self.rows, self.cols, self.group_size, self.grids.clone())?;
        QuantizedLayer::new(codes, grids, self.bits)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| QuantError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| QuantError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Columns decoded per step; `64·bits` bits is a whole number of bytes.
const CHUNK: usize = 64;

/// Decodes 64 codes from `8·BITS` bytes.
#[inline(always)]
fn decode_chunk<const BITS: usize>(src: &[u8], out: &mut [u8; CHUNK]) {
    let mut words = [0u64; 9];
    for (w, bytes) in words.iter_mut().zip(src.chunks_exact(8)) {
        *w = u64::from_le_bytes(bytes.try_into().unwrap());
    }
    let mask = (1u64 << BITS) - 1;
    for (j, o) in out.iter_mut().enumerate() {
        let bit = j * BITS;
        let (word, off) = (bit / 64, bit % 64);
        let mut v = words[word] >> off;
        if off + BITS > 64 {
            v |= words[word + 1] << (64 - off);
        }
        *o = (v & mask) as u8;
    }
}

/// `Σ code_c · x_c` over a run of columns, four fixed accumulation lanes.
#[inline(always)]
fn dot_codes(codes: &[u8], x: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let mut cc = codes.chunks_exact(4);
    let mut xc = x.chunks_exact(4);
    for (c, v) in (&mut cc).zip(&mut xc) {
        lanes[0] += c[0] as f64 * v[0];
        lanes[1] += c[1] as f64 * v[1];
        lanes[2] += c[2] as f64 * v[2];
        lanes[3] += c[3] as f64 * v[3];
    }
    let mut tail = 0.0;
    for (c, v) in cc.remainder().iter().zip(xc.remainder()) {
        tail += *c as f64 * v;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// `y = Ŵ·x` read straight from the packed codes.
///
/// Within a group of constant grid, `Σ scale·(code − zero)·x` is computed as
/// `scale · (Σ code·x − zero · Σ x)`; the per-group `Σ x` is shared by every
/// row. All accumulation is in `f64`, the result is rounded to `f32`.
pub fn qmatvec(p: &PackedWeights, x: &[f32]) -> Result<Vec<f32>> {
    qmatvec_with(p, x, use_tables(p))
}

/// Rows needed before building the lookup tables pays off.
const TABLE_MIN_ROWS: usize = 16;

/// Tables apply to 2, 3 and 4 bits when group boundaries fall on whole chunks.
fn use_tables(p: &PackedWeights) -> bool {
    let gs = crate::grid::effective_group_size(p.cols, p.group_size);
    p.bits != 8
        && p.rows >= TABLE_MIN_ROWS
        && p.cols >= CHUNK
        && (gs >= p.cols || gs.is_multiple_of(CHUNK))
}

fn qmatvec_with(p: &PackedWeights, x: &[f32], tables: bool) -> Result<Vec<f32>> {
    if x.len() != p.cols {
        return Err(QuantError::DimensionMismatch(format!(
            "vector has {} elements, matrix has {} columns",
            x.len(),
            p.cols
        )));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite(i));
    }
    let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let gs = crate::grid::effective_group_size(p.cols, p.group_size);
    let groups = p.groups_per_row();
    let group_sums: Vec<f64> = xs.chunks(gs).map(|c| c.iter().sum()).collect();
    // `sums[g]` holds `Σ code·x` over group `g` of row `r`.
    let finish = |r: usize, sums: &[f64]| {
        let grids = &p.grids[r * groups..(r + 1) * groups];
        let mut acc = 0.0f64;
        for (g, grid) in grids.iter().enumerate() {
            acc += grid.scale() as f64 * (sums[g] - grid.zero() as f64 * group_sums[g]);
        }
        acc as f32
    };

    let mut y = Vec::with_capacity(p.rows);
    if tables {
        let lut = CodeTables::new(&xs, p.bits);
        match p.bits {
            2 => lut.run::<2>(p, &xs, gs, &finish, &mut y),
            3 => lut.run::<3>(p, &xs, gs, &finish, &mut y),
            _ => lut.run::<4>(p, &xs, gs, &finish, &mut y),
        }
    } else {
        let mut code_buf = vec![0u8; p.cols.div_ceil(CHUNK) * CHUNK];
        let mut sums = vec![0.0f64; groups];
        for r in 0..p.rows {
            decode_row(p.row_payload(r), p.bits, p.cols, &mut code_buf);
            for (g, s) in sums.iter_mut().enumerate() {
                let lo = g * gs;
                let hi = (lo + gs).min(p.cols);
                *s = dot_codes(&code_buf[lo..hi], &xs[lo..hi]);
            }
            y.push(finish(r, &sums));
        }
    }
    Ok(y)
}

/// Rows that share one pass over the tables, chunk by chunk.
const TABLE_ROW_TILE: usize = 64;

/// Columns whose packed codes index one table entry. Tables per 64-column
/// chunk stay at or under 32 KiB.
const fn tuple_cols(bits: usize) -> usize {
    match bits {
        2 => 4,
        3 => 2,
        _ => 1,
    }
}

/// For every tuple of adjacent columns, `Σ code_i · x_i` over all code
/// combinations, indexed by the packed bits of the tuple.
struct CodeTables {
    stride: usize,
    table: Vec<f64>,
}

impl CodeTables {
    fn new(x: &[f64], bits: u32) -> Self {
        let k = tuple_cols(bits as usize);
        let stride = 1usize << (k * bits as usize);
        let mask = max_code(bits) as usize;
        let tuples = x.len() / CHUNK * CHUNK / k;
        let mut table = vec![0.0f64; tuples * stride];
        for (xt, tab) in x.chunks_exact(k).zip(table.chunks_exact_mut(stride)) {
            for (idx, e) in tab.iter_mut().enumerate() {
                let mut s = 0.0;
                for (i, &xv) in xt.iter().enumerate() {
                    s += ((idx >> (i * bits as usize)) & mask) as f64 * xv;
                }
                *e = s;
            }
        }
        Self { stride, table }
    }

    /// Whole chunks go through the tables a tile of rows at a time; the
    /// columns past the last whole chunk are decoded and multiplied directly.
    fn run<const BITS: usize>(
        &self,
        p: &PackedWeights,
        xs: &[f64],
        gs: usize,
        finish: &dyn Fn(usize, &[f64]) -> f32,
        y: &mut Vec<f32>,
    ) {
        let groups = p.groups_per_row();
        let chunk_bytes = CHUNK * BITS / 8;
        let full = p.cols / CHUNK;
        let per_chunk = CHUNK / tuple_cols(BITS) * self.stride;
        let mut sums = vec![0.0f64; TABLE_ROW_TILE * groups];
        let mut tail = Vec::with_capacity(CHUNK);
        for start in (0..p.rows).step_by(TABLE_ROW_TILE) {
            let end = (start + TABLE_ROW_TILE).min(p.rows);
            sums.fill(0.0);
            for c in 0..full {
                let g = c * CHUNK / gs;
                let tab = &self.table[c * per_chunk..(c + 1) * per_chunk];
                for r in start..end {
                    let src = &p.row_payload(r)[c * chunk_bytes..(c + 1) * chunk_bytes];
                    sums[(r - start) * groups + g] += self.dot_chunk::<BITS>(src, tab);
                }
            }
            for r in start..end {
                let row_sums = &mut sums[(r - start) * groups..(r - start + 1) * groups];
                if p.cols > full * CHUNK {
                    tail.clear();
                    unpack_row(
                        &p.row_payload(r)[full * chunk_bytes..],
                        p.bits,
                        p.cols - full * CHUNK,
                        &mut tail,
                    );
                    row_sums[groups - 1] += dot_codes(&tail, &xs[full * CHUNK..]);
                }
                y.push(finish(r, row_sums));
            }
        }
    }

    /// `Σ code·x` over one 64-column chunk. Every `BITS` bytes hold eight
    /// codes, so fields never straddle the 32-bit window.
    #[inline(always)]
    fn dot_chunk<const BITS: usize>(&self, src: &[u8], tab: &[f64]) -> f64 {
        let width = tuple_cols(BITS) * BITS;
        let stride = 1usize << width;
        let mask = (stride - 1) as u32;
        let per_window = 8 * BITS / width;
        let mut lanes = [0.0f64; 4];
        for (bytes, t) in src
            .chunks_exact(BITS)
            .zip(tab.chunks_exact(per_window * stride))
        {
            let mut v = 0u32;
            for (i, &b) in bytes.iter().enumerate() {
                v |= (b as u32) << (8 * i);
            }
            for i in 0..per_window {
                lanes[i % 4] += t[i * stride + ((v >> (i * width)) & mask) as usize];
            }
        }
        (lanes[0] + lanes[1]) + (lanes[2] + lanes[3])
    }
}

/// Decodes one row into `out` (length rounded up to a multiple of 64).
fn decode_row(src: &[u8], bits: u32, cols: usize, out: &mut [u8]) {
    let chunk_bytes = CHUNK * bits as usize / 8;
    let full = cols / CHUNK;
    let mut tmp = [0u8; CHUNK];
    for c in 0..full {
        let bytes = &src[c * chunk_bytes..(c + 1) * chunk_bytes];
        match bits {
            2 => decode_chunk::<2>(bytes, &mut tmp),
            3 => decode_chunk::<3>(bytes, &mut tmp),
            4 => decode_chunk::<4>(bytes, &mut tmp),
            _ => decode_chunk::<8>(bytes, &mut tmp),
        }
        out[c * CHUNK..(c + 1) * CHUNK].copy_from_slice(&tmp);
    }
    let rest = cols - full * CHUNK;
    if rest > 0 {
        let mut tail = Vec::with_capacity(rest);
        unpack_row(&src[full * chunk_bytes..], bits, rest, &mut tail);
        out[full * CHUNK..full * CHUNK + rest].copy_from_slice(&tail);
    }
}

/// Dense float32 matvec with the same accumulation scheme as [`qmatvec`]:
/// the baseline the packed kernel is timed against.
pub fn dense_matvec_f32(weights: &[f32], rows: usize, cols: usize, x: &[f32]) -> Vec<f32> {
    let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    (0..rows)
        .map(|r| {
            let row = &weights[r * cols..(r + 1) * cols];
            let mut lanes = [0.0f64; 4];
            let mut wc = row.chunks_exact(4);
            let mut xc = xs.chunks_exact(4);
            for (w, v) in (&mut wc).zip(&mut xc) {
                lanes[0] += w[0] as f64 * v[0];
                lanes[1] += w[1] as f64 * v[1];
                lanes[2] += w[2] as f64 * v[2];
                lanes[3] += w[3] as f64 * v[3];
            }
            let mut tail = 0.0;
            for (w, v) in wc.remainder().iter().zip(xc.remainder()) {
                tail += *w as f64 * v;
            }
            ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail) as f32
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BenchReport {
    pub rows: usize,
    pub cols: usize,
    pub bits: u32,
    pub trials: usize,
    /// Packed code bytes only.
    pub code_bytes: usize,
    /// Grid scale/zero bytes.
    pub metadata_bytes: usize,
    /// Weight bytes of the same matrix stored as float16.
    pub fp16_bytes: usize,
    /// Weight bytes of the dense float32 baseline that is actually timed.
    pub fp32_bytes: usize,
    /// `16 / bits`.
    pub analytic_ratio: f64,
    /// fp16 weight bytes over packed code + metadata bytes.
    pub ratio_with_metadata: f64,
    /// Bytes read and written per qmatvec call (weights, grids, x, y).
    pub qmatvec_bytes_touched: usize,
    pub dense_bytes_touched: usize,
    /// Best-of-trials wall times; machine-dependent.
    pub qmatvec_time: Duration,
    pub dense_time: Duration,
    pub qmatvec_gbps: f64,
    pub dense_gbps: f64,
}

impl BenchReport {
    pub fn speedup(&self) -> f64 {
        self.dense_time.as_secs_f64() / self.qmatvec_time.as_secs_f64().max(1e-12)
    }
}

/// Times [`qmatvec`] against a dense float32 matvec of the dequantized
/// matrix. Correctness is not checked here.
pub fn matvec_bench(p: &PackedWeights, trials: usize) -> Result<BenchReport> {
    if trials == 0 {
        return Err(QuantError::InvalidConfig(
            "trials must be at least 1".into(),
        ));
    }
    let layer = p.to_layer()?;
    let dense: Vec<f32> = crate::grid::dequantize_layer(&layer)
        .data()
        .iter()
        .map(|&v| v as f32)
        .collect();
    let mut rng = SeededRng::new(0x6265_6e63);
    let x: Vec<f32> = (0..p.cols).map(|_| rng.standard_normal() as f32).collect();

    let mut q_best = Duration::MAX;
    let mut d_best = Duration::MAX;
    for _ in 0..trials {
        let t0 = Instant::now();
        let y = qmatvec(p, &x)?;
        q_best = q_best.min(t0.elapsed());
        std::hint::black_box(y);

        let t0 = Instant::now();
        let y = dense_matvec_f32(&dense, p.rows, p.cols, &x);
        d_best = d_best.min(t0.elapsed());
        std::hint::black_box(y);
    }

    let code_bytes = p.payload.len();
    let metadata_bytes = p.metadata_bytes();
    let fp16_bytes = p.rows * p.cols * 2;
    let fp32_bytes = p.rows * p.cols * 4;
    let vec_bytes = 4 * (p.rows + p.cols);
    let q_touched = code_bytes + metadata_bytes + vec_bytes;
    let d_touched = fp32_bytes + vec_bytes;
    let gbps = |bytes: usize, t: Duration| bytes as f64 / t.as_secs_f64().max(1e-12) / 1e9;
    Ok(BenchReport {
        rows: p.rows,
        cols: p.cols,
        bits: p.bits,
        trials,
        code_bytes,
        metadata_bytes,
        fp16_bytes,
        fp32_bytes,
        analytic_ratio: 16.0 / p.bits as f64,
        ratio_with_metadata: fp16_bytes as f64 / (code_bytes + metadata_bytes) as f64,
        qmatvec_bytes_touched: q_touched,
        dense_bytes_touched: d_touched,
        qmatvec_time: q_best,
        dense_time: d_best,
        qmatvec_gbps: gbps(q_touched, q_best),
        dense_gbps: gbps(d_touched, d_best),
    })
}
