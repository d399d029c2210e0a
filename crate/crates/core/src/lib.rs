//! Local connectivity descriptors for task-fMRI classification.
//!
//! Region time series are turned into mesh arc descriptors (MADs): for every
//! region, the ridge-regression weights that reconstruct its series from its
//! `p` most correlated regions. The set of MADs of one recording is then
//! encoded against a dictionary learned on training data, as a Fisher vector
//! (diagonal GMM), a VLAD vector or a bag-of-words histogram (k-means), and
//! classified with one-vs-rest linear SVMs under subject-disjoint
//! cross-validation.
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`dataio`] | datasets on disk, synthetic generation, voxel averaging, folds |
//! | [`mesh`] | functional neighbours and ridge-fitted arc weights |
//! | [`decomp`] | PCA used to decorrelate descriptors |
//! | [`clustering`] | k-means and diagonal GMM dictionaries |
//! | [`encoding`] | Fisher vector, VLAD and bag-of-words encoders |
//! | [`classify`] | linear SVM, cross-validation, grid search |
//! | [`analysis`] | Gaussian block energy, ablation, baselines, codeword export |
//! | [`cli`] | subcommand drivers used by the `madenc` binary |

pub mod analysis;
pub mod classify;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod dataio;
pub mod decomp;
pub mod encoding;
pub mod error;
pub mod mesh;
pub mod seed;
pub mod store;

pub use error::{Error, Result};
