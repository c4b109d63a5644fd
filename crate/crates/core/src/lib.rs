//! Semi-supervised point localization on synthetic crowd scenes.
//!
//! A small anchor-grid proposal network is trained with a mean teacher.
//! Teacher pseudo-points are smoothed by averaging with neighbouring
//! proposals ([`consist::position_aggregate`]) and weighted by their
//! classification confidence ([`consist::iuc_weight`]) before supervising
//! the student.

pub mod assign;
pub mod cli;
pub mod consist;
pub mod error;
pub mod geom;
pub mod loss;
pub mod metric;
pub mod net;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use geom::{euclidean_distance, AnchorGridMeta, MatchResult, Point2D, PointSet, ProposalSet, ScoredProposal};
