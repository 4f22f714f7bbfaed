mod elementwise;
mod matmul;
mod reduce;
mod shape;
