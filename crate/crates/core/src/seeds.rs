//! Seed derivation for independent RNG streams.
//!
//! Every random decision in a run is drawn from a stream derived from the one
//! experiment seed, a stream tag, and up to two indices (epoch, step, sample
//! id). Changing one knob therefore never perturbs the draws of another, and
//! resuming from a checkpoint replays the exact stream of an uninterrupted
//! run.

/// Which consumer a derived seed belongs to.
#[derive(Copy, Clone, Debug)]
pub enum Stream {
    Init = 1,
    Cluster = 2,
    Sample = 3,
    Augment = 4,
    Rotation = 5,
    SynthTrain = 6,
    SynthEval = 7,
    EvalCluster = 8,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(base: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut z = splitmix(base ^ GOLDEN.wrapping_mul(stream as u64 + 1));
    z = splitmix(z ^ GOLDEN.wrapping_mul(a.wrapping_add(1)));
    splitmix(z ^ GOLDEN.wrapping_mul(b.wrapping_add(1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct_and_stable() {
        let a = derive(7, Stream::Init, 0, 0);
        let b = derive(7, Stream::Cluster, 0, 0);
        let c = derive(7, Stream::Init, 1, 0);
        let d = derive(7, Stream::Init, 0, 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_ne!(c, d);
        assert_eq!(a, derive(7, Stream::Init, 0, 0));
    }
}
