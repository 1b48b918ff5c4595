fn main() {
    println!("layeranat");
}
