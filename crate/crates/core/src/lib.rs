pub mod diffcore;
pub mod linalg;
pub mod transforms;
pub mod conditioner;
pub mod flow;
pub mod data;
pub mod trainer;
