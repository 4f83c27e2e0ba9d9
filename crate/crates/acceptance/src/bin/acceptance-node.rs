//! `flowgate-node` built inside this package so its tests can spawn it.

fn main() {
    flowgate::node::cli_main();
}
