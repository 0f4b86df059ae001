//! Simulation and analysis of a fiber Sagnac loop used for phase-encoded key
//! distribution and for locating disturbances along the fiber.
//!
//! ```
//! use sagnac_core::optics::LoopChannel;
//! use sagnac_core::perception::{localize, theoretical_null_frequency, NullFrequency};
//!
//! let ch = LoopChannel::default();
//! let f = theoretical_null_frequency(1, 5_000.0, &ch).unwrap();
//! let null = NullFrequency { f_null_hz: f, harmonic_k: 1, depth_db: 30.0, uncertainty_hz: 0.0 };
//! assert!((localize(&null, &ch).unwrap() - 5_000.0).abs() < 1e-6);
//! ```

// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod controller;
pub mod disturbance;
pub mod io;
pub mod optics;
pub mod perception;
pub mod qkd;
pub mod wm;

/// Derive an independent stream seed from a parent seed (splitmix64 mix).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

macro_rules! book_chapters {
    ($($name:ident => $file:literal),* $(,)?) => {
        $(
            #[cfg(doctest)]
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            mod $name {}
        )*
    };
}

book_chapters! {
    book_introduction => "introduction.md",
    book_optics => "optics.md",
    book_key_distribution => "key_distribution.md",
    book_disturbances => "disturbances.md",
    book_perception => "perception.md",
    book_weak_measurement => "weak_measurement.md",
    book_controller => "controller.md",
    book_cli => "cli.md",
}
