"""Independent parameter-count sums for the reference layer shapes."""

def conv(cin, cout, k=3):
    return k * k * cin * cout + cout

def dense(n_in, n_out):
    return n_in * n_out + n_out

vgg_blocks = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]
total, cin, per_block = 0, 3, []
for convs, filters in vgg_blocks:
    block = 0
    for _ in range(convs):
        block += conv(cin, filters)
        cin = filters
    per_block.append(block)
    total += block

print("conv 3->32:", conv(3, 32))
print("dense 12800->256:", dense(12800, 256))
print("vgg16 backbone:", total)
print("block5:", per_block[4])
