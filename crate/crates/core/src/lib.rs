pub mod chain;
pub mod poly;
pub mod qpbuild;
pub mod qpsolve;
pub mod planner;
pub mod runtime;
pub mod iface;
