//! Child-seed derivation. Every random stream in a run descends from one
//! master seed through `derive_seed(parent, label, index)`, so adding a new
//! consumer never perturbs existing streams.

/// FNV-1a over the label bytes, mixed with the parent and index through a
/// splitmix64 finalizer.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(splitmix(parent ^ h).wrapping_add(index))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
