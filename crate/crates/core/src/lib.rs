//! Compact Gaussian hair.
//!
//! Converts strand-level hair geometry into a hierarchical representation:
//! strands are clustered into hair cards, each card carries a strand texture,
//! cards are clustered by texture similarity and every card cluster shares a
//! small appearance codebook. A single shared decoder turns a blended codebook
//! feature into the spherical-harmonic colors of every Gaussian along a strand.
//!
//! The crate is organised by pipeline stage:
//!
//! | module       | stage                                                        |
//! |--------------|--------------------------------------------------------------|
//! | [`hairio`]   | strand file formats (`.hair`, `CGH0` blobs), resampling       |
//! | [`synth`]    | deterministic synthetic wisps and per-Gaussian target colors  |
//! | [`cluster`]  | seeded k-means, strand features, strand clustering            |
//! | [`card`]     | guide fitting, card normals, width and strip meshes           |
//! | [`uvmap`]    | inverse UV mapping of strands onto cards, strand textures     |
//! | [`codebook`] | card clustering, Gumbel-softmax codebooks, decoder, fitting   |
//! | [`gsplat`]   | cylindrical Gaussian strands, SH evaluation, CPU splatting    |
//! | [`report`]   | size accounting, compression ratios, PSNR and strand metrics  |
//! | [`pipeline`] | config file and the stage driver used by the `cghair` binary  |

pub mod bspline;
pub mod card;
pub mod cluster;
pub mod codebook;
pub mod geom;
pub mod gsplat;
pub mod hairio;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod uvmap;

pub use geom::Vec3;
pub use hairio::{Hairstyle, Strand};
