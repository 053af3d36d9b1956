"""Longitudinal lesion matching, rigid registration, and track bookkeeping."""

from .errors import (DataError, DivergedError, EmptyMask, GeometryError,
                     InputMismatch, InsufficientOverlap, InsufficientRange,
                     InvalidCost, LesionTrackError, OutOfBounds, ParseError,
                     SizeError, SpecError)
from .evaluation import (REFERENCE_COHORT, CohortReport, PatientScore,
                         ReaderCounts, aggregate, reader_alignment,
                         report_to_dict, score_patient)
from .matching import (Assignment, Correspondence, CostMatrix, IncomingTrack,
                       MatchConfig, MatchDecision, MatchedPair, assign_names,
                       match_lesions, merge_into_registry, solve_assignment,
                       threshold_filter)
from .model import (LesionAnnotation, LesionClass, LesionTrack, Observation,
                    Point3, TrackRegistry, Volume, canonical_name,
                    contains_point, parse_canonical_name, physical_to_voxel,
                    physical_to_voxel_array, voxel_center_extent,
                    voxel_to_physical, voxel_to_physical_array)
from .phantom import (LongitudinalPhantom, PhantomLesion, PhantomSpec,
                      build_longitudinal_phantom, generate_phantom,
                      resample_with_background, transform_phantom)
from .pipeline import (PatientDataset, PipelineConfig, SeriesData,
                       TimepointData, load_tracks_json, match_across_series,
                       match_across_timepoints, match_within_series,
                       run_patient, save_audit_jsonl, save_tracks_json,
                       tracks_from_dict, tracks_to_dict)
from .registration import (BinaryMask, RegistrationConfig, RegistrationResult,
                           RigidTransform, apply_transform, compose, dice,
                           euler_angles, identity_transform,
                           initialize_transform, invert_transform,
                           map_lesion_centroids, mattes_mi, preprocess_mask,
                           register, resample, rotation_matrix, with_center)
from .viz import Marker, TriaxialRequest, render_track_sheet, render_triaxial
from .volume_io import (AnnotationTable, VolumeHeader, load_annotations,
                        load_volume, read_header, save_annotations,
                        save_volume, volume_filename)

__version__ = "0.1.0"
