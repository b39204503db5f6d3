pub mod decode;
pub mod duration;
pub mod error;
pub mod grad;
pub mod io;
pub mod lattice;
pub mod numeric;
pub mod oracle;
pub mod problem;
