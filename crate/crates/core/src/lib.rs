pub mod attention;
pub mod cli;
pub mod autodiff;
pub mod data;
pub mod diem;
pub mod hvi;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use tensor::{Scalar, Tensor};
