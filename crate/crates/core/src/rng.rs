//! Philox4x32-10 counter-based generator and the derived samplers.
//!
//! Every random quantity in the toolkit is a pure function of
//! `(seed, stream, index)`, which keeps datasets, initialisations and plans
//! reproducible in any language. The byte-level contract lives in
//! `docs/rng.md`; in short:
//!
//! * key = `[seed as u32, (seed >> 32) as u32]`
//! * counter for block `b` of stream `s` = `[b lo, b hi, s lo, s hi]`
//! * the u32 stream is block 0 lanes 0..4, block 1 lanes 0..4, ...
//! * uniform in (0,1): `(u as f64 + 0.5) / 2^32`
//! * normals come in pairs from u32 pair `(u[2m], u[2m+1])` by Box–Muller:
//!   `r = sqrt(-2 ln a)`, `z[2m] = r cos(2π b)`, `z[2m+1] = r sin(2π b)`
//! * bounded integer below `n`: `(u as u64 * n) >> 32`

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;

/// Stream identifiers. The upper 32 bits are free for a sub-index (epoch, sample...).
pub mod streams {
    pub const GAUSS_INPUT: u64 = 1;
    pub const DATASET_NOISE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const PLAN: u64 = 5;
    pub const PROTECT: u64 = 6;
    pub const STRESS: u64 = 7;
    pub const SAMPLE: u64 = 8;

    pub const fn with_sub(stream: u64, sub: u32) -> u64 {
        stream | ((sub as u64) << 32)
    }
}

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// One Philox4x32-10 block.
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(W0);
            k[1] = k[1].wrapping_add(W1);
        }
        let (hi0, lo0) = mulhilo(M0, c[0]);
        let (hi1, lo1) = mulhilo(M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// Random-access view over one `(seed, stream)` pair.
#[derive(Debug, Clone, Copy)]
pub struct Philox {
    key: [u32; 2],
    stream: u64,
}

impl Philox {
    pub fn new(seed: u64, stream: u64) -> Self {
        Philox {
            key: [seed as u32, (seed >> 32) as u32],
            stream,
        }
    }

    pub fn block(&self, block: u64) -> [u32; 4] {
        philox4x32_10(
            [
                block as u32,
                (block >> 32) as u32,
                self.stream as u32,
                (self.stream >> 32) as u32,
            ],
            self.key,
        )
    }

    /// The `index`-th u32 of the stream.
    pub fn u32_at(&self, index: u64) -> u32 {
        self.block(index / 4)[(index % 4) as usize]
    }

    /// The `index`-th standard normal of the stream.
    pub fn normal_at(&self, index: u64) -> f32 {
        let pair = index / 2;
        let lanes = self.block(pair / 2);
        let base = ((pair % 2) * 2) as usize;
        let (z0, z1) = box_muller(lanes[base], lanes[base + 1]);
        if index % 2 == 0 {
            z0 as f32
        } else {
            z1 as f32
        }
    }

    pub fn reader(&self) -> PhiloxReader {
        PhiloxReader {
            gen: *self,
            next: 0,
        }
    }
}

pub fn unit_open(u: u32) -> f64 {
    (f64::from(u) + 0.5) / 4_294_967_296.0
}

pub fn box_muller(ua: u32, ub: u32) -> (f64, f64) {
    let a = unit_open(ua);
    let b = unit_open(ub);
    let r = (-2.0 * a.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * b;
    (r * theta.cos(), r * theta.sin())
}

/// Sequential consumer of a stream.
#[derive(Debug, Clone)]
pub struct PhiloxReader {
    gen: Philox,
    next: u64,
}

impl PhiloxReader {
    pub fn next_u32(&mut self) -> u32 {
        let v = self.gen.u32_at(self.next);
        self.next += 1;
        v
    }

    pub fn uniform(&mut self) -> f64 {
        unit_open(self.next_u32())
    }

    /// Uniform integer in `0..n`; `n` must fit in 32 bits.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0 && n as u64 <= u64::from(u32::MAX) + 1);
        ((u64::from(self.next_u32()) * n as u64) >> 32) as usize
    }
}

/// `k` distinct indices from `0..n`, uniformly, via a partial Fisher–Yates
/// shuffle driven by `reader.below`.
pub fn sample_without_replacement(reader: &mut PhiloxReader, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot draw {k} of {n}");
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + reader.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Full Fisher–Yates permutation of `0..n`.
pub fn permutation(reader: &mut PhiloxReader, n: usize) -> Vec<usize> {
    sample_without_replacement(reader, n, n)
}
