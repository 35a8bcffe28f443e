"""Error-bounded KV-cache compression with fused decode attention.

Pipeline: blockwise error-bounded quantization, shared canonical
Huffman codebooks built once at prefill, fine-grained parallel entropy
coding into append-only arenas, and attention that decodes compressed
slices directly inside the dot product.
"""

from .attention import (
    AttentionOutput,
    attention_step,
    fused_k_scores,
    fused_v_output,
    multistage_attention,
    reference_output,
    reference_scores,
    softmax_rows,
)
from .bench import (
    BenchRow,
    CompressionStats,
    SimulationSettings,
    collect_stats,
    equivalent_decompression_throughput,
    run_ratio_sweep,
    run_simulation,
)
from .codebook import (
    HuffmanCodebook,
    build_codebook,
    build_histogram,
    deserialize_codebook,
    histogram_entropy,
    serialize_codebook,
    smooth_histogram,
)
from .codec import (
    CompressedArena,
    CompressedBlock,
    DataMovement,
    compress_block,
    decode_slice,
    decode_slices,
    decompress_block,
    encode_slice,
    metadata_overhead,
    scan_offsets,
)
from .container import load_state, read_header, save_state
from .errors import (
    ArenaFullError,
    CodebookError,
    CodecError,
    ConfigError,
    ContainerFormatError,
    KvpackError,
    TensorFormatError,
)
from .kvcache import LayerCacheState
from .quantizer import (
    QuantConfig,
    QuantMode,
    QuantUnitMeta,
    QuantizedBlock,
    dequantize_block,
    quantize_block,
    quantize_unit,
)
from .tensor_io import (
    CacheTensor,
    SyntheticSpec,
    generate_synthetic,
    read_tensor,
    write_tensor,
)

__version__ = "0.1.0"
