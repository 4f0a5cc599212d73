//! Holds the `acceptance` test target, which trains real models and so runs
//! after the faster suites of the other crates.
