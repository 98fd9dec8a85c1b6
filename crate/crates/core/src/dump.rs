//! Binary dump of block tables.
//!
//! Layout, all little-endian: the five bytes `MLQR1`, then `n: u64`,
//! `N: u64`, `h: f64`, then every `n×n` block as row-major `f64`s, blocks in
//! table order.

use crate::linalg::{self, Mat};
use crate::propagator::PropagatorTables;
use crate::riccati::RiccatiSolution;
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MLQR1";
const HEADER_LEN: usize = 5 + 8 + 8 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TableDump {
    pub n: usize,
    pub steps: usize,
    pub step: f64,
    pub blocks: Vec<Mat>,
}

pub fn encode(n: usize, steps: usize, step: f64, blocks: &[Mat]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + blocks.len() * n * n * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(steps as u64).to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    for b in blocks {
        assert_eq!(b.shape(), (n, n), "dump blocks must be n×n");
        for x in linalg::to_row_major(b) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("slice of length 8"))
}

/// Parse a dump, rejecting anything that does not match the layout exactly.
pub fn decode_table(bytes: &[u8]) -> Result<TableDump> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Parse("table dump shorter than its header".into()));
    }
    if &bytes[..5] != MAGIC {
        return Err(Error::Parse("bad table dump magic".into()));
    }
    let n = read_u64(bytes, 5);
    let steps = read_u64(bytes, 13);
    let step = f64::from_bits(read_u64(bytes, 21));
    if n == 0 {
        return Err(Error::Parse("table dump with zero block size".into()));
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Parse("table dump step not positive".into()));
    }
    let block_bytes = n
        .checked_mul(n)
        .and_then(|x| x.checked_mul(8))
        .and_then(|x| usize::try_from(x).ok())
        .ok_or_else(|| Error::Parse("table dump block size overflows".into()))?;
    let steps = usize::try_from(steps).map_err(|_| Error::Parse("table dump step count overflows".into()))?;
    let body = &bytes[HEADER_LEN..];
    if !body.len().is_multiple_of(block_bytes) {
        return Err(Error::Parse(format!(
            "table dump body of {} bytes is not a whole number of {block_bytes}-byte blocks",
            body.len()
        )));
    }
    let n = n as usize;
    let blocks = body
        .chunks_exact(block_bytes)
        .map(|chunk| {
            let data: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of length 8")))
                .collect();
            linalg::from_row_major(n, n, &data)
        })
        .collect();
    Ok(TableDump {
        n,
        steps,
        step,
        blocks,
    })
}

/// `E_i`, `μ_i`, `R_i`, then `F(t_d, 0)` for `d = 0..=N`.
pub fn encode_propagators(prop: &PropagatorTables) -> Vec<u8> {
    let blocks: Vec<Mat> = prop
        .semigroup
        .blocks
        .iter()
        .chain(&prop.mu.blocks)
        .chain(&prop.resolvent.blocks)
        .chain(&prop.f.lags)
        .cloned()
        .collect();
    encode(prop.n(), prop.grid.steps(), prop.grid.step(), &blocks)
}

/// For each checkpoint node `i` in increasing order: `P0(t_i)`, `P1(t_i, s_j)`
/// for `j = 0..=i`, then `P2[j][k]` row by row.
pub fn encode_checkpoints(sol: &RiccatiSolution) -> Vec<u8> {
    let mut blocks = Vec::new();
    for (&i, slice) in &sol.p2 {
        blocks.push(sol.p0[i].clone());
        blocks.extend(sol.p1[i].iter().cloned());
        for j in 0..slice.size() {
            for k in 0..slice.size() {
                blocks.push(slice.get(j, k).clone());
            }
        }
    }
    encode(sol.n, sol.steps(), sol.step, &blocks)
}
