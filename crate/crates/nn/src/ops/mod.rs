mod basic;
mod conv;
mod norm;
