from .dataset import DatasetFormatError, dataset_read, dataset_write, split_dataset
from .pcap import CsiFrame, ParseStats, PcapFormatError, parse_pcap, write_pcap
from .preprocess import (
    AssemblyStats,
    CsiMatrix,
    RadioImage,
    SubcarrierMask,
    assemble_matrix,
    filter_subcarriers,
    frames_to_images,
    moving_average,
    preprocess,
    to_radio_image,
)
from .synth import SCENARIOS, Scenario, synth_capture, synth_dataset, synth_generate
