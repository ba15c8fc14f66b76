fn main() {
    println!("oarseg");
}
