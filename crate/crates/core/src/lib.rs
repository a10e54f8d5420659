pub mod eval;
pub mod graph;
pub mod io;
pub mod lie;
pub mod loops;
pub mod optimizer;
pub mod sim;
pub mod trajectory;
pub mod window;

pub use trajectory::Trajectory;
