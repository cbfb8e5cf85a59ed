//! Shared test oracles.
#![allow(dead_code)]

pub mod aggregate;
pub mod frames;
pub mod harness;
pub mod tracked;

/// Independent model of one link direction's random stream: PCG32 seed
/// expansion into a ChaCha8 key, then 64-bit outputs built from pairs of
/// keystream words (low word first).
pub struct OracleRng {
    key: [u32; 8],
    counter: u64,
    block: [u32; 16],
    index: usize,
}

pub fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl OracleRng {
    pub fn for_direction(link_seed: u64, direction: u64) -> Self {
        let mut state = splitmix(link_seed ^ (0xa5a5_0000_0000_0000 | direction));
        let mut key = [0u32; 8];
        for k in key.iter_mut() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(11634580027462260723);
            let xorshifted = (((state >> 18) ^ state) >> 27) as u32;
            *k = xorshifted.rotate_right((state >> 59) as u32);
        }
        OracleRng { key, counter: 0, block: [0; 16], index: 16 }
    }

    fn refill(&mut self) {
        let mut s = [0u32; 16];
        s[..4].copy_from_slice(&[0x61707865, 0x3320646e, 0x79622d32, 0x6b206574]);
        s[4..12].copy_from_slice(&self.key);
        s[12] = self.counter as u32;
        s[13] = (self.counter >> 32) as u32;
        let input = s;
        fn qr(s: &mut [u32; 16], a: usize, b: usize, c: usize, d: usize) {
            s[a] = s[a].wrapping_add(s[b]);
            s[d] = (s[d] ^ s[a]).rotate_left(16);
            s[c] = s[c].wrapping_add(s[d]);
            s[b] = (s[b] ^ s[c]).rotate_left(12);
            s[a] = s[a].wrapping_add(s[b]);
            s[d] = (s[d] ^ s[a]).rotate_left(8);
            s[c] = s[c].wrapping_add(s[d]);
            s[b] = (s[b] ^ s[c]).rotate_left(7);
        }
        for _ in 0..4 {
            qr(&mut s, 0, 4, 8, 12);
            qr(&mut s, 1, 5, 9, 13);
            qr(&mut s, 2, 6, 10, 14);
            qr(&mut s, 3, 7, 11, 15);
            qr(&mut s, 0, 5, 10, 15);
            qr(&mut s, 1, 6, 11, 12);
            qr(&mut s, 2, 7, 8, 13);
            qr(&mut s, 3, 4, 9, 14);
        }
        for i in 0..16 {
            self.block[i] = s[i].wrapping_add(input[i]);
        }
        self.counter += 1;
        self.index = 0;
    }

    pub fn next_u64(&mut self) -> u64 {
        if self.index >= 16 {
            self.refill();
        }
        let lo = self.block[self.index] as u64;
        let hi = self.block[self.index + 1] as u64;
        self.index += 2;
        (hi << 32) | lo
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Fate of one frame on a simulated link: the latencies of the copies that
/// get delivered (empty when dropped).
pub struct OracleLink {
    rngs: [OracleRng; 2],
    drop_prob: f64,
    dup_prob: f64,
    latency: (u64, u64),
}

impl OracleLink {
    pub fn new(seed: u64, drop_prob: f64, dup_prob: f64, latency: (u64, u64)) -> Self {
        OracleLink {
            rngs: [OracleRng::for_direction(seed, 0), OracleRng::for_direction(seed, 1)],
            drop_prob,
            dup_prob,
            latency,
        }
    }

    pub fn send(&mut self, direction: usize) -> Vec<u64> {
        let (min, max) = self.latency;
        let span = max - min + 1;
        let rng = &mut self.rngs[direction];
        if rng.unit() < self.drop_prob {
            return vec![];
        }
        let mut out = vec![min + rng.next_u64() % span];
        if rng.unit() < self.dup_prob {
            out.push(min + rng.next_u64() % span);
        }
        out
    }
}
