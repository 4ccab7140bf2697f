"""Desk-scale volumetric vision-language pre-training."""

from .config import LOSS_NAMES, RunConfig, cosine_lr
from .contrastive import (ProjectionHeads, SharedEmbeddings, Temperatures,
                          contextualize, cosine_matrix, info_nce, loss_cm,
                          loss_cm_local, loss_cm_top)
from .data import PairedDataset, load_paired_dataset
from .fusion import (MultiModalConfig, MultiModalEncoder, loss_match,
                     loss_mm_mlm, mine_hard_negatives)
from .model import VelvetModel
from .reports import (RawReport, StatsTable, TextCaps, TokenizedReport,
                      Vocabulary, corpus_stats, detokenize, segment_report,
                      tokenize, wordpiece)
from .retrieval import RetrievalReport, embed_pairs, eval_retrieval
from .ssl_tasks import (InpaintingTask, MaskedTextBatch, RotationTask,
                        loss_con, loss_inp, loss_mlm, loss_rot,
                        make_inpainting, make_rotation, mask_tokens,
                        rotate_xy)
from .swin3d import SwinEncoder3D, VisionConfig, VisionPyramid
from .synth import default_vocabulary, synth_dataset, write_synth_dataset
from .trainer import LossBundle, Trainer, composite_loss
from .tribert import (TriBatch, TriBertConfig, TriBertEncoder, TextFeatureSet,
                      build_tri_batch, build_tri_mask)
from .volumes import (AugmentConfig, Volume, VolumeRecord, extract_subvolume,
                      filter_record, resample_to_volume, z_sample_indices)

__version__ = "0.1.0"
