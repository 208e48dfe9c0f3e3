"""Autoregressive SID recommender: losses, training and constrained decoding."""
from .core import (DEFAULT_ALPHA, allowed_at, DEFAULT_KA, DEFAULT_KB, EPS, ModelParams, Packed, auo_loss,
                   batch_losses, build_undesired, build_undesired_items, closed_form_output_grad,
                   encode_context, grad_analytic, init_params, load_checkpoint, loss_value, nll_loss,
                   nll_output_grad, pack_examples, pack_table, rescue_update, save_checkpoint,
                   step_probabilities, token_logits, total_loss, undesired_member_update, undesired_table)
from .decode import (beam_decode, enumerate_paths, path_log_probs, popularity_ranking, recommend,
                     recommend_popular)
from .train import TrainConfig, epoch_order, hit_rate_at, validation_hr, TrainingDiverged, TrainResult, TrainState, train, write_log
