//! Labelled seed derivation, so each subsystem draws from its own stream.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// One round of the splitmix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for the subsystem `label` under `master`.
pub fn derive(master: u64, label: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(label)))
}

/// Seed for item `index` of the subsystem `label`.
pub fn derive_indexed(master: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive(master, label) ^ splitmix64(index.wrapping_add(1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_indices_separate_streams() {
        assert_eq!(derive(7, "data"), derive(7, "data"));
        assert_ne!(derive(7, "data"), derive(7, "init"));
        assert_ne!(derive(7, "data"), derive(8, "data"));
        assert_ne!(derive_indexed(7, "fold", 0), derive_indexed(7, "fold", 1));
    }
}
