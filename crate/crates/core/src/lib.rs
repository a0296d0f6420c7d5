//! Sequential recommendation with learnable positional attention.
//!
//! Item sequences are modelled by stacked attention blocks whose attention
//! weights are either a learned position-by-position matrix (`Positional`),
//! its low-rank factorization (`Factorized`), content-based scaled
//! dot-product attention (`DotProduct`), or a handcrafted fixed pattern.

pub mod analysis;
pub mod dataset;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod training;
