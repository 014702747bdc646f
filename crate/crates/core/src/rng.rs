//! Counter-based random streams (Philox4x32-10).
//!
//! A stream is addressed by `(seed, purpose, substream)`; its state is just a
//! word position, so any stream can be replayed or resumed in isolation.

use rand_core::RngCore;

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// Ten-round Philox4x32 block function.
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

/// What a stream is used for; part of the counter so purposes never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Purpose {
    Init = 1,
    Partition = 2,
    Shuffle = 3,
    Data = 4,
}

impl Purpose {
    pub fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(Purpose::Init),
            2 => Some(Purpose::Partition),
            3 => Some(Purpose::Shuffle),
            4 => Some(Purpose::Data),
            _ => None,
        }
    }
}

/// Serializable position of a [`StreamRng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamState {
    pub seed: u64,
    pub purpose: Purpose,
    pub substream: u64,
    pub position: u64,
}

#[derive(Debug, Clone)]
pub struct StreamRng {
    state: StreamState,
    block: [u32; 4],
    block_index: Option<u64>,
}

impl StreamRng {
    pub fn new(seed: u64, purpose: Purpose, substream: u64) -> Self {
        Self::from_state(StreamState {
            seed,
            purpose,
            substream,
            position: 0,
        })
    }

    pub fn from_state(state: StreamState) -> Self {
        StreamRng {
            state,
            block: [0; 4],
            block_index: None,
        }
    }

    pub fn state(&self) -> StreamState {
        self.state
    }

    fn refill(&mut self, index: u64) {
        assert!(index <= u64::from(u32::MAX), "stream exhausted");
        let s = self.state;
        let counter = [
            index as u32,
            s.substream as u32,
            (s.substream >> 32) as u32,
            s.purpose as u32,
        ];
        let key = [s.seed as u32, (s.seed >> 32) as u32];
        self.block = philox4x32_10(counter, key);
        self.block_index = Some(index);
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        let pos = self.state.position;
        let index = pos / 4;
        if self.block_index != Some(index) {
            self.refill(index);
        }
        self.state.position += 1;
        self.block[(pos % 4) as usize]
    }

    fn next_u64(&mut self) -> u64 {
        let lo = u64::from(self.next_u32());
        let hi = u64::from(self.next_u32());
        (hi << 32) | lo
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(4) {
            let word = self.next_u32().to_le_bytes();
            chunk.copy_from_slice(&word[..chunk.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors from the Random123 distribution.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0; 4], [0; 2]),
            [0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344],
                [0xa4093822, 0x299f31d0]
            ),
            [0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1]
        );
    }

    #[test]
    fn resume_from_state_replays_tail() {
        let mut a = StreamRng::new(7, Purpose::Partition, 3);
        for _ in 0..5 {
            a.next_u32();
        }
        let mut b = StreamRng::from_state(a.state());
        let tail_a: Vec<u32> = (0..9).map(|_| a.next_u32()).collect();
        let tail_b: Vec<u32> = (0..9).map(|_| b.next_u32()).collect();
        assert_eq!(tail_a, tail_b);
    }

    #[test]
    fn purposes_and_substreams_are_distinct() {
        let first = |p, s| StreamRng::new(1, p, s).next_u64();
        assert_ne!(first(Purpose::Init, 0), first(Purpose::Partition, 0));
        assert_ne!(first(Purpose::Partition, 0), first(Purpose::Partition, 1));
        assert_eq!(first(Purpose::Shuffle, 5), first(Purpose::Shuffle, 5));
    }
}
