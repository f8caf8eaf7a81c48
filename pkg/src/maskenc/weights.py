"""Weight container: text header + little-endian float64 payloads.

Layout: one UTF-8 header line per tensor (`name dtype dim0 dim1 ...`),
a blank line, then the raw row-major float64 payloads concatenated in
header order. The only supported dtype token is `f64`. Round-trips are
bit-exact and header order is preserved.
"""

import numpy as np

DTYPE_TOKEN = "f64"


def save_weights(path, tensors):
    """Write an ordered {name: array} mapping to `path`."""
    arrays = {name: np.ascontiguousarray(arr, dtype=np.float64)
              for name, arr in tensors.items()}
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            if any(ch.isspace() for ch in name):
                raise ValueError(f"tensor name {name!r} contains whitespace")
            dims = " ".join(str(d) for d in arr.shape)
            line = f"{name} {DTYPE_TOKEN} {dims}".rstrip()
            fh.write(line.encode("utf-8") + b"\n")
        fh.write(b"\n")
        for arr in arrays.values():
            fh.write(arr.astype("<f8").tobytes())


def load_weights(path):
    """Read a container back into an ordered {name: array} mapping."""
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise ValueError(f"{path}: no blank line terminating the header")
    header = blob[:sep].decode("utf-8")
    payload = blob[sep + 2:]
    tensors = {}
    offset = 0
    for line in header.splitlines():
        parts = line.split()
        if len(parts) < 2:
            raise ValueError(f"{path}: malformed header line {line!r}")
        name, dtype = parts[0], parts[1]
        if dtype != DTYPE_TOKEN:
            raise ValueError(f"{path}: unsupported dtype {dtype!r} for {name!r}")
        shape = tuple(int(d) for d in parts[2:])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise ValueError(f"{path}: payload truncated at tensor {name!r}")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return tensors
